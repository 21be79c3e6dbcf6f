use serde::{Deserialize, Serialize};

use crate::autodiff::linalg::{gemm, Layout};
use crate::autodiff::Tensor;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::rng::Rng;

use super::{mean_ap, MetricError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 1e-2, seed: 0 }
    }
}

/// Logistic-regression probe `R^D -> R^A` on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `[D x A]`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LinearProbe {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn attributes(&self) -> usize {
        self.bias.len()
    }

    /// Logits for every row of `features`.
    pub fn predict(&self, features: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (n, d, a) = (features.len(), self.dim(), self.attributes());
        if n == 0 {
            return Vec::new();
        }
        let x = self.standardize(features);
        let mut out = vec![0.0; n * a];
        gemm(n, d, a, &x, Layout::Normal, &self.weight, Layout::Normal, &mut out, false);
        out.chunks(a).map(|r| r.iter().zip(&self.bias).map(|(v, b)| v + b).collect()).collect()
    }

    fn standardize(&self, features: &[Vec<f64>]) -> Vec<f64> {
        features
            .iter()
            .flat_map(|r| r.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s))
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Fits a probe by full-batch Adam on the mean binary cross-entropy over all
/// samples and attributes. Features are standardized per dimension with the
/// training statistics (zero-variance dimensions keep unit scale).
pub fn train_probe(features: &[Vec<f64>], labels: &[Vec<f64>], cfg: &ProbeConfig) -> Result<LinearProbe, MetricError> {
    let n = features.len();
    if n == 0 || n != labels.len() {
        return Err(MetricError::Shape(format!("{n} feature rows vs {} label rows", labels.len())));
    }
    let d = features[0].len();
    let a = labels[0].len();
    if features.iter().any(|r| r.len() != d) || labels.iter().any(|r| r.len() != a) {
        return Err(MetricError::Shape("ragged features or labels".into()));
    }
    let informative = (0..a).any(|j| {
        let pos = labels.iter().filter(|r| r[j] > 0.5).count();
        pos > 0 && pos < n
    });
    if !informative {
        return Err(MetricError::Degenerate("every attribute is constant over the training set".into()));
    }
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            let v = features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut probe = LinearProbe { weight: vec![0.0; d * a], bias: vec![0.0; a], mean, std };
    let mut rng = Rng::new(cfg.seed, 0);
    probe.weight.iter_mut().for_each(|w| *w = 0.01 * rng.normal());
    let x = probe.standardize(features);
    let y: Vec<f64> = labels.iter().flatten().copied().collect();

    let mut params = ParamStore::new();
    let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
    let mut logits = vec![0.0; n * a];
    let mut gw = vec![0.0; d * a];
    let scale = 1.0 / (n * a) as f64;
    for _ in 0..cfg.epochs {
        gemm(n, d, a, &x, Layout::Normal, &probe.weight, Layout::Normal, &mut logits, false);
        let mut gb = vec![0.0; a];
        for (i, row) in logits.chunks_mut(a).enumerate() {
            for (j, z) in row.iter_mut().enumerate() {
                let g = (sigmoid(*z + probe.bias[j]) - y[i * a + j]) * scale;
                *z = g;
                gb[j] += g;
            }
        }
        gemm(d, n, a, &x, Layout::Transposed, &logits, Layout::Normal, &mut gw, false);
        params.insert("w", Tensor::new(&[d, a], std::mem::take(&mut probe.weight)).expect("shape"));
        params.insert("b", Tensor::new(&[a], std::mem::take(&mut probe.bias)).expect("shape"));
        let mut grads = ParamStore::new();
        grads.insert("w", Tensor::new(&[d, a], gw.clone()).expect("shape"));
        grads.insert("b", Tensor::new(&[a], gb).expect("shape"));
        opt.step(&mut params, &grads, |_| Some(cfg.lr));
        probe.weight = params.get("w").expect("present").data().to_vec();
        probe.bias = params.get("b").expect("present").data().to_vec();
    }
    Ok(probe)
}

/// `mAP[k][g]`: probe `k` applied to part-`k` features, averaged over the
/// attributes of ground-truth part `g`.
pub fn probe_matrix(
    probes: &[LinearProbe],
    features: &[Vec<Vec<f64>>],
    labels: &[Vec<f64>],
    groups: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>, MetricError> {
    if probes.len() != features.len() {
        return Err(MetricError::Shape(format!("{} probes vs {} feature sets", probes.len(), features.len())));
    }
    probes
        .iter()
        .zip(features)
        .map(|(p, f)| {
            let scores = p.predict(f);
            groups.iter().map(|g| mean_ap(&scores, labels, g)).collect()
        })
        .collect()
}
