//! Measuring and mitigating intra-object feature leakage in part-based vision
//! transformers.
//!
//! * [`autodiff`]: a small reverse-mode AD engine over `f64` tensors.
//! * [`vit`]: a ViT with replicated prefix tokens and clique attention masks.
//! * [`partmodel`]: stage-1 part discovery, stage-2 masked prediction, losses.
//! * [`metrics`]: part specificity, most-predictive-part overlap, AP, NMI/ARI.
//! * [`synth`]: synthetic part/attribute datasets with tunable correlation.
//! * [`harness`]: experiment drivers behind the `partleak` CLI.

pub mod autodiff;
mod error;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod partmodel;
pub mod rng;
pub mod synth;
pub mod vit;

pub use error::{Error, Result};
pub use exec::Exec;
