use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{try_map_range, Exec};
use crate::metrics::report::MetricRow;
use crate::metrics::{
    contingency, extract_early, extract_late, mppo, part_specificity, patch_labels, probe_matrix,
    train_probe, LinearProbe, MppoReport, PartAssignment, PsReport,
};
use crate::params::ParamStore;
use crate::synth::{DatasetSpec, Sample};

use super::{mask_area, ExperimentConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Masking {
    Late,
    Early,
}

impl Masking {
    pub const ALL: [Masking; 2] = [Masking::Late, Masking::Early];

    pub fn name(self) -> &'static str {
        match self {
            Masking::Late => "late",
            Masking::Early => "early",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskingResult {
    pub masking: Masking,
    /// `mAP[k][g]` on the test split.
    pub matrix: Vec<Vec<f64>>,
    pub assignment: PartAssignment,
    pub ps: PsReport,
    pub mppo: MppoReport,
    pub mask_area: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkReport {
    pub results: Vec<MaskingResult>,
    /// Mean attribute prevalence of every ground-truth part on the test split.
    pub prevalence: Vec<f64>,
}

impl BenchmarkReport {
    pub fn get(&self, masking: Masking) -> Option<&MaskingResult> {
        self.results.iter().find(|r| r.masking == masking)
    }

    pub fn rows(&self, spec: &DatasetSpec) -> Vec<MetricRow> {
        let names = spec.attribute_names();
        let mut rows = Vec::new();
        for r in &self.results {
            let mode = r.masking.name();
            rows.push(MetricRow::new("ps", "all", mode, r.ps.ps));
            for (g, v) in r.ps.per_group.iter().enumerate() {
                rows.push(MetricRow::new("ps", format!("g{g}"), mode, *v));
            }
            rows.push(MetricRow::new("mppo", "all", mode, r.mppo.mppo));
            for (a, v) in r.mppo.per_attribute.iter().enumerate() {
                if let Some(v) = v {
                    rows.push(MetricRow::new("mppo", &names[a], mode, *v));
                }
            }
            let area = r.mask_area.iter().sum::<f64>() / r.mask_area.len() as f64;
            rows.push(MetricRow::new("mask_area", "all", mode, area));
            for (k, v) in r.mask_area.iter().enumerate() {
                rows.push(MetricRow::new("mask_area", format!("k{k}"), mode, *v));
            }
            for (k, row) in r.matrix.iter().enumerate() {
                for (g, v) in row.iter().enumerate() {
                    rows.push(MetricRow::new("map", format!("k{k}_g{g}"), mode, *v));
                }
            }
        }
        for (g, v) in self.prevalence.iter().enumerate() {
            rows.push(MetricRow::new("prevalence", format!("g{g}"), "none", *v));
        }
        rows
    }
}

/// Per-sample, per-part features `[N][K][D]` under the given masking.
pub fn part_features(
    exec: Exec,
    backbone: &ParamStore,
    cfg: &ExperimentConfig,
    samples: &[Sample],
    masks: &[Vec<Vec<bool>>],
    masking: Masking,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if samples.len() != masks.len() {
        return Err(Error::Config(format!("{} samples vs {} mask sets", samples.len(), masks.len())));
    }
    let vit = &cfg.vit;
    try_map_range(exec, samples.len(), |i| {
        let f = match masking {
            Masking::Late => extract_late(backbone, vit, &samples[i].image, &masks[i])?,
            Masking::Early => {
                let labels = patch_labels(&masks[i], vit.num_patches())?;
                extract_early(backbone, vit, &samples[i].image, &labels, masks[i].len())?
            }
        };
        Ok(f.v)
    })
}

/// Trains one probe per part on `train` features and returns test logits
/// `[N][K][A]` along with the probes.
pub fn probe_logits(
    cfg: &ExperimentConfig,
    train: &[Vec<Vec<f64>>],
    train_labels: &[Vec<f64>],
    test: &[Vec<Vec<f64>>],
    seed: u64,
) -> Result<(Vec<LinearProbe>, Vec<Vec<Vec<f64>>>)> {
    let parts = train.first().map_or(0, Vec::len);
    let probe_cfg = crate::metrics::ProbeConfig { seed, ..cfg.probe.clone() };
    let mut probes = Vec::with_capacity(parts);
    let mut per_part = Vec::with_capacity(parts);
    for k in 0..parts {
        let x: Vec<Vec<f64>> = train.iter().map(|s| s[k].clone()).collect();
        let probe = train_probe(&x, train_labels, &probe_cfg)?;
        let t: Vec<Vec<f64>> = test.iter().map(|s| s[k].clone()).collect();
        per_part.push(probe.predict(&t));
        probes.push(probe);
    }
    let logits = (0..test.len()).map(|s| (0..parts).map(|k| per_part[k][s].clone()).collect()).collect();
    Ok((probes, logits))
}

/// Late- and early-masked probing with explicit part masks for both splits.
pub fn benchmark_with_masks(
    cfg: &ExperimentConfig,
    backbone: &ParamStore,
    train: (&[Sample], &[Vec<Vec<bool>>]),
    test: (&[Sample], &[Vec<Vec<bool>>]),
    seed: u64,
) -> Result<BenchmarkReport> {
    let spec = &cfg.dataset;
    let groups = spec.attribute_groups();
    let group_of = spec.group_of();
    let train_labels: Vec<Vec<f64>> = train.0.iter().map(|s| s.labels.clone()).collect();
    let test_labels: Vec<Vec<f64>> = test.0.iter().map(|s| s.labels.clone()).collect();
    let keypoints: Vec<_> = test.0.iter().map(|s| s.keypoints.clone()).collect();
    let gt: Vec<Vec<Vec<bool>>> = test.0.iter().map(|s| s.masks.clone()).collect();
    let assignment = contingency(&keypoints, test.1, spec.groups, cfg.vit.grid(), cfg.tau)?;
    let prevalence = groups
        .iter()
        .map(|attrs| {
            attrs.iter().map(|&a| test_labels.iter().map(|r| r[a]).sum::<f64>() / test_labels.len() as f64).sum::<f64>()
                / attrs.len() as f64
        })
        .collect();
    let mut results = Vec::new();
    for masking in Masking::ALL {
        let ftrain = part_features(cfg.exec, backbone, cfg, train.0, train.1, masking)?;
        let ftest = part_features(cfg.exec, backbone, cfg, test.0, test.1, masking)?;
        let (probes, logits) = probe_logits(cfg, &ftrain, &train_labels, &ftest, seed)?;
        let parts = probes.len();
        let per_part: Vec<Vec<Vec<f64>>> = (0..parts).map(|k| ftest.iter().map(|s| s[k].clone()).collect()).collect();
        let matrix = probe_matrix(&probes, &per_part, &test_labels, &groups)?;
        debug_assert!(matrix.iter().all(|r| r.len() == groups.len()));
        let ps = part_specificity(&matrix, &assignment)?;
        let mppo = mppo(&logits, &test_labels, test.1, &gt, &group_of, cfg.kstar)?;
        results.push(MaskingResult { masking, matrix, assignment: assignment.clone(), ps, mppo, mask_area: mask_area(test.1) });
    }
    Ok(BenchmarkReport { results, prevalence })
}

/// [`benchmark_with_masks`] with the ground-truth part masks as parts.
pub fn run_benchmark(cfg: &ExperimentConfig, backbone: &ParamStore, train: &[Sample], test: &[Sample], seed: u64) -> Result<BenchmarkReport> {
    let masks = |s: &[Sample]| -> Vec<Vec<Vec<bool>>> { s.iter().map(|x| x.masks.clone()).collect() };
    let (mtrain, mtest) = (masks(train), masks(test));
    benchmark_with_masks(cfg, backbone, (train, &mtrain), (test, &mtest), seed)
}
