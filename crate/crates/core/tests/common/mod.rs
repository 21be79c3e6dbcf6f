#![allow(dead_code)]

pub mod loss_oracles;
pub mod metric_oracles;
