use serde::{Deserialize, Serialize};

use super::MetricError;

/// A ground-truth keypoint in patch-grid coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keypoint {
    pub row: usize,
    pub col: usize,
    pub group: usize,
    pub visible: bool,
}

/// Assignment of discovered parts to ground-truth parts.
#[derive(Clone, Debug, PartialEq)]
pub struct PartAssignment {
    /// `c[g][k]`, `[G x K]`.
    pub c: Vec<Vec<f64>>,
    pub tau: f64,
    pub k_plus: Vec<Vec<usize>>,
    pub k_minus: Vec<Vec<usize>>,
}

impl PartAssignment {
    /// Splits discovered parts by `c[g][k] > tau`.
    pub fn from_matrix(c: Vec<Vec<f64>>, tau: f64) -> Self {
        let (k_plus, k_minus) = c
            .iter()
            .map(|row| {
                let (p, m): (Vec<usize>, Vec<usize>) = (0..row.len()).partition(|&k| row[k] > tau);
                (p, m)
            })
            .unzip();
        Self { c, tau, k_plus, k_minus }
    }

    /// The same matrix with `K+` and `K-` exchanged for every part.
    pub fn swapped(&self) -> Self {
        Self { c: self.c.clone(), tau: self.tau, k_plus: self.k_minus.clone(), k_minus: self.k_plus.clone() }
    }
}

/// Co-occurrence `c[g][k]`: the fraction of samples with a visible keypoint
/// of `g` in which some visible keypoint of `g` falls inside discovered mask
/// `k`. `masks[s][k]` is a patch mask on a `grid`-wide lattice.
pub fn contingency(
    keypoints: &[Vec<Keypoint>],
    masks: &[Vec<Vec<bool>>],
    groups: usize,
    grid: usize,
    tau: f64,
) -> Result<PartAssignment, MetricError> {
    if keypoints.len() != masks.len() {
        return Err(MetricError::Shape(format!("{} keypoint sets vs {} mask sets", keypoints.len(), masks.len())));
    }
    let parts = masks.first().map_or(0, Vec::len);
    let mut hits = vec![vec![0usize; parts]; groups];
    let mut seen = vec![0usize; groups];
    for (kps, ms) in keypoints.iter().zip(masks) {
        if ms.len() != parts {
            return Err(MetricError::Shape(format!("{} masks vs {parts}", ms.len())));
        }
        let mut visible = vec![false; groups];
        let mut hit = vec![vec![false; parts]; groups];
        for kp in kps.iter().filter(|kp| kp.visible) {
            if kp.group >= groups {
                return Err(MetricError::Shape(format!("keypoint group {} >= {groups}", kp.group)));
            }
            let cell = kp.row * grid + kp.col;
            visible[kp.group] = true;
            for (k, m) in ms.iter().enumerate() {
                let on = m.get(cell).ok_or_else(|| MetricError::Shape(format!("keypoint cell {cell} outside mask")))?;
                hit[kp.group][k] |= *on;
            }
        }
        for g in 0..groups {
            if visible[g] {
                seen[g] += 1;
                for k in 0..parts {
                    hits[g][k] += hit[g][k] as usize;
                }
            }
        }
    }
    if let Some(group) = seen.iter().position(|&n| n == 0) {
        return Err(MetricError::NeverVisible { group });
    }
    let c = hits.iter().zip(&seen).map(|(row, &n)| row.iter().map(|&h| h as f64 / n as f64).collect()).collect();
    Ok(PartAssignment::from_matrix(c, tau))
}
