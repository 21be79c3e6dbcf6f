use serde::{Deserialize, Serialize};

use super::MetricError;
use crate::autodiff::argmax;

/// How the most predictive part is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KStar {
    /// Separately for every attribute-present sample.
    #[default]
    PerSample,
    /// Once per attribute, from logits averaged over its present samples.
    MeanLogit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MppoReport {
    /// `None` for attributes never present.
    pub per_attribute: Vec<Option<f64>>,
    pub mppo: f64,
}

/// Most-predictive-part overlap.
///
/// `logits[s][k][a]` is probe `k` on part `k` of sample `s`; `discovered[s][k]`
/// and `gt[s][g]` are binary masks on the same lattice; `group_of[a]` is the
/// ground-truth part of attribute `a`. A sample counts as a hit when the mask
/// of its most predictive part shares at least one cell with `gt[s][g(a)]`.
pub fn mppo(
    logits: &[Vec<Vec<f64>>],
    labels: &[Vec<f64>],
    discovered: &[Vec<Vec<bool>>],
    gt: &[Vec<Vec<bool>>],
    group_of: &[usize],
    kstar: KStar,
) -> Result<MppoReport, MetricError> {
    let n = logits.len();
    if labels.len() != n || discovered.len() != n || gt.len() != n {
        return Err(MetricError::Shape("logits, labels and masks must cover the same samples".into()));
    }
    let overlaps = |a: &[bool], b: &[bool]| a.iter().zip(b).any(|(x, y)| *x && *y);
    let mut per_attribute = Vec::with_capacity(group_of.len());
    for (a, &g) in group_of.iter().enumerate() {
        let present: Vec<usize> = (0..n).filter(|&s| labels[s][a] > 0.5).collect();
        if present.is_empty() {
            log::warn!("attribute {a} is never present; skipped in MPPO");
            per_attribute.push(None);
            continue;
        }
        let column = |s: usize| -> Vec<f64> { logits[s].iter().map(|row| row[a]).collect() };
        let shared = match kstar {
            KStar::PerSample => None,
            KStar::MeanLogit => {
                let mut mean = vec![0.0; logits[present[0]].len()];
                for &s in &present {
                    mean.iter_mut().zip(column(s)).for_each(|(m, x)| *m += x);
                }
                Some(argmax(&mean))
            }
        };
        let mut hits = 0usize;
        for &s in &present {
            let k = shared.unwrap_or_else(|| argmax(&column(s)));
            let mask = gt[s].get(g).ok_or_else(|| MetricError::Shape(format!("no mask for part {g}")))?;
            let part = discovered[s].get(k).ok_or_else(|| MetricError::Shape(format!("no mask for part {k}")))?;
            hits += overlaps(part, mask) as usize;
        }
        per_attribute.push(Some(hits as f64 / present.len() as f64));
    }
    let valid: Vec<f64> = per_attribute.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(MetricError::Degenerate("no attribute is present in any sample".into()));
    }
    Ok(MppoReport { mppo: valid.iter().sum::<f64>() / valid.len() as f64, per_attribute })
}
