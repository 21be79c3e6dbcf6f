//! Leakage measurements: average precision, linear probes, the keypoint
//! contingency assignment, part specificity, most-predictive-part overlap,
//! clustering agreement, and late/early part feature extraction.

mod ap;
mod clustering;
mod contingency;
mod extract;
mod mppo;
mod probe;
mod ps;
pub mod report;

pub use ap::{average_precision, mean_ap};
pub use clustering::{adjusted_rand_index, nmi_ari, normalized_mutual_information, PartQualityReport};
pub use contingency::{contingency, Keypoint, PartAssignment};
pub use extract::{extract_early, extract_late, late_pool, patch_labels, PartFeatures};
pub use mppo::{mppo, KStar, MppoReport};
pub use probe::{probe_matrix, train_probe, LinearProbe, ProbeConfig};
pub use ps::{part_specificity, PsReport};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("average precision is undefined without positive labels")]
    NoPositives,
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("ground-truth part {group} is never visible")]
    NeverVisible { group: usize },
    #[error("empty {which} set for ground-truth part {group}")]
    EmptyAssignment { group: usize, which: &'static str },
    #[error("shape mismatch: {0}")]
    Shape(String),
}
