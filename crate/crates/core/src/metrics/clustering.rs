use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MetricError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartQualityReport {
    pub nmi: f64,
    pub ari: f64,
}

struct Table {
    cells: Vec<Vec<f64>>,
    rows: Vec<f64>,
    cols: Vec<f64>,
    n: f64,
}

fn table(pred: &[usize], truth: &[usize]) -> Result<Table, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::Shape(format!("{} predictions vs {} labels", pred.len(), truth.len())));
    }
    let index = |xs: &[usize]| -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &x in xs {
            let next = m.len();
            m.entry(x).or_insert(next);
        }
        m
    };
    let (pi, ti) = (index(pred), index(truth));
    if pi.len() < 2 || ti.len() < 2 {
        return Err(MetricError::Degenerate(format!(
            "{} predicted and {} true clusters; need at least two each",
            pi.len(),
            ti.len()
        )));
    }
    let mut cells = vec![vec![0.0; ti.len()]; pi.len()];
    for (p, t) in pred.iter().zip(truth) {
        cells[pi[p]][ti[t]] += 1.0;
    }
    let rows = cells.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..ti.len()).map(|j| cells.iter().map(|r| r[j]).sum()).collect();
    Ok(Table { cells, rows, cols, n: pred.len() as f64 })
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum()
}

/// Mutual information over the mean of the two entropies.
pub fn normalized_mutual_information(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    let t = table(pred, truth)?;
    let mut mi = 0.0;
    for (i, row) in t.cells.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                mi += c / t.n * (t.n * c / (t.rows[i] * t.cols[j])).ln();
            }
        }
    }
    let denom = 0.5 * (entropy(&t.rows, t.n) + entropy(&t.cols, t.n));
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn pairs(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index.
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    let t = table(pred, truth)?;
    let index: f64 = t.cells.iter().flatten().map(|&c| pairs(c)).sum();
    let a: f64 = t.rows.iter().map(|&c| pairs(c)).sum();
    let b: f64 = t.cols.iter().map(|&c| pairs(c)).sum();
    let expected = a * b / pairs(t.n);
    let max = 0.5 * (a + b);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

pub fn nmi_ari(pred: &[usize], truth: &[usize]) -> Result<PartQualityReport, MetricError> {
    Ok(PartQualityReport { nmi: normalized_mutual_information(pred, truth)?, ari: adjusted_rand_index(pred, truth)? })
}
