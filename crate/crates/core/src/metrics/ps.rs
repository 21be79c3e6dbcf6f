use serde::{Deserialize, Serialize};

use super::{MetricError, PartAssignment};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsReport {
    pub per_group: Vec<f64>,
    pub ps: f64,
}

/// `PS_g` = mean of `mAP[k][g]` over `K+_g` minus the mean over `K-_g`;
/// `PS` is the mean over parts. `matrix` is `[K x G]`.
pub fn part_specificity(matrix: &[Vec<f64>], asg: &PartAssignment) -> Result<PsReport, MetricError> {
    let groups = asg.k_plus.len();
    if asg.k_minus.len() != groups || groups == 0 {
        return Err(MetricError::Shape(format!("{groups} K+ sets vs {} K- sets", asg.k_minus.len())));
    }
    if let Some(row) = matrix.iter().find(|r| r.len() != groups) {
        return Err(MetricError::Shape(format!("mAP row of length {} for {groups} parts", row.len())));
    }
    let mean = |set: &[usize], g: usize| -> Result<f64, MetricError> {
        let vals = set
            .iter()
            .map(|&k| matrix.get(k).map(|r| r[g]).ok_or_else(|| MetricError::Shape(format!("part {k} outside matrix"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let mut per_group = Vec::with_capacity(groups);
    for g in 0..groups {
        if asg.k_plus[g].is_empty() {
            return Err(MetricError::EmptyAssignment { group: g, which: "K+" });
        }
        if asg.k_minus[g].is_empty() {
            return Err(MetricError::EmptyAssignment { group: g, which: "K-" });
        }
        per_group.push(mean(&asg.k_plus[g], g)? - mean(&asg.k_minus[g], g)?);
    }
    let ps = per_group.iter().sum::<f64>() / groups as f64;
    Ok(PsReport { per_group, ps })
}
