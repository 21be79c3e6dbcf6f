use crate::autodiff::{argmax, Tape, Tensor};
use crate::error::{Error, Result};
use crate::exec::try_map_range;
use crate::metrics::report::MetricRow;
use crate::metrics::{mean_ap, mppo, nmi_ari, MppoReport, PartQualityReport};
use crate::params::ParamStore;
use crate::partmodel::{
    ensemble_logits, frozen_features, init_stage1, init_stage2, stage1_forward, stage2_forward, train, EpochLog, Mode,
    TrainSample,
};
use crate::rng::Rng;
use crate::synth::Sample;

use super::{benchmark::probe_logits, mask_area, ExperimentConfig};

/// Evaluation-mode outputs of a trained part model on one image.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleEval {
    /// Hard part label of every patch (`K` is the background).
    pub labels: Vec<usize>,
    /// Per-part features `[K][D]`: Stage-2 CLS outputs in two-stage modes,
    /// pooled Stage-1 part vectors otherwise.
    pub features: Vec<Vec<f64>>,
    /// Final attribute logits (the ensemble in two-stage modes).
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelReport {
    pub variant: Mode,
    pub quality: PartQualityReport,
    pub mppo: MppoReport,
    /// Attribute mAP of the final logits on the test split.
    pub map: f64,
    /// Mean fraction of patches per part, background last.
    pub mask_area: Vec<f64>,
    pub logs: Vec<EpochLog>,
}

impl ModelReport {
    pub fn rows(&self, names: &[String]) -> Vec<MetricRow> {
        let mode = self.variant.name();
        let k = self.mask_area.len() - 1;
        let mut rows = vec![
            MetricRow::new("nmi", "all", mode, self.quality.nmi),
            MetricRow::new("ari", "all", mode, self.quality.ari),
            MetricRow::new("map", "all", mode, self.map),
            MetricRow::new("mppo", "all", mode, self.mppo.mppo),
            MetricRow::new("mask_area", "all", mode, self.mask_area[..k].iter().sum::<f64>() / k as f64),
        ];
        for (a, v) in self.mppo.per_attribute.iter().enumerate() {
            if let Some(v) = v {
                rows.push(MetricRow::new("mppo", &names[a], mode, *v));
            }
        }
        for (i, v) in self.mask_area.iter().enumerate() {
            let key = if i == k { "bg".to_string() } else { format!("k{i}") };
            rows.push(MetricRow::new("mask_area", key, mode, *v));
        }
        rows
    }
}

/// Runs a trained model (`s1.*`, plus `s2.*` in two-stage modes) in
/// evaluation mode on `sample`, whose frozen features are `z`.
pub fn evaluate_model(params: &ParamStore, cfg: &ExperimentConfig, mode: Mode, sample: &Sample, z: &Tensor) -> Result<SampleEval> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let zv = tape.constant(z.clone());
    let s1 = stage1_forward(&mut tape, &bound.scope("s1"), zv, None)?;
    let maps = tape.value(s1.maps.clean);
    let labels = (0..maps.rows()).map(|r| argmax(maps.row(r))).collect();
    let logits1 = tape.value(s1.routing.logits).data().to_vec();
    let (features, logits) = match mode.mask_variant() {
        None => {
            let fg = s1.parts.foreground(&mut tape)?;
            let v = tape.value(fg);
            ((0..v.rows()).map(|k| v.row(k).to_vec()).collect(), logits1)
        }
        Some(variant) => {
            let out = stage2_forward(&mut tape, &bound.scope("s2"), &cfg.vit, &sample.image, s1.maps.soft, variant)?;
            let cls = tape.value(out.cls);
            let feats = (0..cls.rows()).map(|k| cls.row(k).to_vec()).collect();
            (feats, ensemble_logits(&logits1, tape.value(out.routing.logits).data())?)
        }
    };
    Ok(SampleEval { labels, features, logits })
}

/// Trains the `mode` variant on the frozen `backbone` and evaluates it on
/// `test`: keypoint NMI/ARI, probe-based MPPO with mask areas, attribute mAP.
/// Returns the trained parameters and the report.
pub fn train_model(
    cfg: &ExperimentConfig,
    backbone: &ParamStore,
    train_set: &[Sample],
    test_set: &[Sample],
    mode: Mode,
    seed: u64,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(ParamStore, ModelReport)> {
    cfg.validate()?;
    let (vit, k, attributes) = (&cfg.vit, cfg.parts, cfg.dataset.attributes());
    let features = |set: &[Sample]| try_map_range(cfg.exec, set.len(), |i| frozen_features(backbone, vit, &set[i].image));
    let z_train = features(train_set)?;
    let z_test = features(test_set)?;

    let mut params = init_stage1(vit.embed_dim, k, attributes, &mut Rng::new(seed, 20))?.with_prefix("s1");
    if mode != Mode::Single {
        params.extend(init_stage2(backbone, vit, k, attributes, &mut Rng::new(seed, 21))?.with_prefix("s2"));
    }
    let data: Vec<TrainSample> = train_set
        .iter()
        .zip(&z_train)
        .map(|(s, z)| TrainSample { image: &s.image, z, labels: &s.labels })
        .collect();
    let logs = train(&mut params, backbone, vit, &data, &cfg.train, &cfg.loss, mode, seed, on_epoch)?;

    let eval = |set: &[Sample], z: &[Tensor]| {
        try_map_range(cfg.exec, set.len(), |i| evaluate_model(&params, cfg, mode, &set[i], &z[i]))
    };
    let ev_train = eval(train_set, &z_train)?;
    let ev_test = eval(test_set, &z_test)?;

    let grid = vit.grid();
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for (s, e) in test_set.iter().zip(&ev_test) {
        for kp in s.keypoints.iter().filter(|kp| kp.visible) {
            pred.push(e.labels[kp.row * grid + kp.col]);
            truth.push(kp.group);
        }
    }
    let quality = nmi_ari(&pred, &truth).unwrap_or_else(|e| {
        log::warn!("{}: {e}; scoring NMI and ARI as 0", mode.name());
        PartQualityReport { nmi: 0.0, ari: 0.0 }
    });

    let discovered = |e: &SampleEval| -> Vec<Vec<bool>> { (0..=k).map(|p| e.labels.iter().map(|&l| l == p).collect()).collect() };
    let test_masks: Vec<Vec<Vec<bool>>> = ev_test.iter().map(discovered).collect();
    let train_labels: Vec<Vec<f64>> = train_set.iter().map(|s| s.labels.clone()).collect();
    let test_labels: Vec<Vec<f64>> = test_set.iter().map(|s| s.labels.clone()).collect();
    let ftrain: Vec<Vec<Vec<f64>>> = ev_train.iter().map(|e| e.features.clone()).collect();
    let ftest: Vec<Vec<Vec<f64>>> = ev_test.iter().map(|e| e.features.clone()).collect();
    let (_, logits) = probe_logits(cfg, &ftrain, &train_labels, &ftest, seed)?;
    let fg_masks: Vec<Vec<Vec<bool>>> = test_masks.iter().map(|m| m[..k].to_vec()).collect();
    let gt: Vec<Vec<Vec<bool>>> = test_set.iter().map(|s| s.masks.clone()).collect();
    let mppo = mppo(&logits, &test_labels, &fg_masks, &gt, &cfg.dataset.group_of(), cfg.kstar)?;

    let final_logits: Vec<Vec<f64>> = ev_test.iter().map(|e| e.logits.clone()).collect();
    let all: Vec<usize> = (0..attributes).collect();
    let map = mean_ap(&final_logits, &test_labels, &all)?;
    if logs.is_empty() && cfg.train.epochs > 0 {
        return Err(Error::Config("training produced no epochs".into()));
    }
    let report = ModelReport { variant: mode, quality, mppo, map, mask_area: mask_area(&test_masks), logs };
    Ok((params, report))
}
