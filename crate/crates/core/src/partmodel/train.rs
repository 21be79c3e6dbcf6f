use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::warp::WarpPlan;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, sqrt_scaled, AdamW, AdamWConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::vit::{MaskVariant, ViTConfig};

use super::{
    frozen_features, loss_attr, loss_entropy, loss_equivariance, loss_orthogonality, loss_presence, loss_tv,
    part_attention_maps, random_affine, stage1_forward, stage2_forward, total_loss, LossBreakdown, LossConfig,
    LossTerms,
};

/// Which model is trained: Stage 1 alone, or both stages with a Stage-2 mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Soft,
    Hard,
    Ste,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Single, Mode::Soft, Mode::Hard, Mode::Ste];

    pub fn mask_variant(self) -> Option<MaskVariant> {
        match self {
            Mode::Single => None,
            Mode::Soft => Some(MaskVariant::Soft),
            Mode::Hard => Some(MaskVariant::Hard),
            Mode::Ste => Some(MaskVariant::Ste),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Single => "single",
            Mode::Soft => "soft",
            Mode::Hard => "hard",
            Mode::Ste => "ste",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (single|soft|hard|ste)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Batch size the base rates refer to; other sizes use square-root scaling.
    pub base_batch: usize,
    pub lr_proto: f64,
    /// Shared norms and attribute heads of both stages.
    pub lr_head: f64,
    /// Stage-2 ViT.
    pub lr_backbone: f64,
    /// Global gradient-norm cap, applied to each stage separately.
    pub clip: f64,
    pub temperature: f64,
    pub adamw: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            base_batch: 64,
            lr_proto: 1e-3,
            lr_head: 1e-3,
            lr_backbone: 1e-4,
            clip: 2.0,
            temperature: 1.0,
            adamw: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.base_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.temperature > 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("temperature and clip must be positive".into()));
        }
        if [self.lr_proto, self.lr_head, self.lr_backbone].iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    /// Base rate of a parameter, `None` if it is not trained in `mode`.
    pub fn base_rate(&self, name: &str, mode: Mode) -> Option<f64> {
        if name == "s1.proto" {
            Some(self.lr_proto)
        } else if name.starts_with("s1.") {
            Some(self.lr_head)
        } else if mode == Mode::Single {
            None
        } else if name.starts_with("s2.vit.") {
            Some(self.lr_backbone)
        } else if name.starts_with("s2.") {
            Some(self.lr_head)
        } else {
            None
        }
    }
}

/// One training example: the image, its frozen backbone features and labels.
#[derive(Clone, Copy, Debug)]
pub struct TrainSample<'a> {
    pub image: &'a Tensor,
    pub z: &'a Tensor,
    pub labels: &'a [f64],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch means of every loss component.
    pub losses: LossBreakdown,
    /// Per part (background last): max activation over the epoch's last batch.
    pub part_peaks: Vec<f64>,
}

fn batch_mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let stacked = tape.concat_rows(terms)?;
    Ok(tape.mean(stacked))
}

/// Records the full objective of one batch on `tape`.
///
/// `gumbel` drives Stage-1 sampling only; Stage 2 draws no randomness, so a
/// Stage-1 trajectory never depends on the Stage-2 variant through the noise.
/// `theta` is the batch's equivariance transform (skipped when `None`).
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    tape: &mut Tape,
    bound: &Bound,
    backbone: &ParamStore,
    vit: &ViTConfig,
    batch: &[TrainSample],
    mode: Mode,
    loss_cfg: &LossConfig,
    temperature: f64,
    gumbel: &mut Rng,
    theta: Option<&crate::autodiff::warp::Affine>,
) -> Result<(Var, LossBreakdown, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let s1 = bound.scope("s1");
    let s2 = bound.scope("s2");
    let grid = vit.grid();
    let plans = theta.map(|t| {
        (Arc::new(WarpPlan::new(grid, grid, t)), WarpPlan::new(vit.image_size, vit.image_size, t))
    });
    let mut att1 = Vec::new();
    let mut att2 = Vec::new();
    let (mut bg, mut decorr, mut tv, mut eq, mut ent, mut clean) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for sample in batch {
        let z = tape.constant(sample.z.clone());
        let out = stage1_forward(tape, &s1, z, Some((&mut *gumbel, temperature)))?;
        att1.push(loss_attr(tape, out.routing.logits, sample.labels)?);
        let (b, d) = loss_orthogonality(tape, &out.parts, loss_cfg)?;
        bg.push(b);
        decorr.push(d);
        tv.push(loss_tv(tape, out.maps.clean, grid)?);
        ent.push(loss_entropy(tape, out.maps.clean)?);
        clean.push(out.maps.clean);
        if let Some((grid_plan, image_plan)) = &plans {
            let warped = image_plan.apply_channel_major(sample.image.data(), vit.channels, 0.5);
            let warped = Tensor::new(sample.image.shape(), warped)?;
            let zw = tape.constant(frozen_features(backbone, vit, &warped)?);
            let maps_w = part_attention_maps(tape, zw, s1.get("proto")?, None)?;
            eq.push(loss_equivariance(tape, maps_w.clean, out.maps.clean, grid_plan)?);
        }
        if let Some(variant) = mode.mask_variant() {
            let out2 = stage2_forward(tape, &s2, vit, sample.image, out.maps.soft, variant)?;
            att2.push(loss_attr(tape, out2.routing.logits, sample.labels)?);
        }
    }
    let eq = if eq.is_empty() { tape.constant(Tensor::scalar(0.0)) } else { batch_mean(tape, &eq)? };
    let terms = LossTerms {
        att1: batch_mean(tape, &att1)?,
        att2: if att2.is_empty() { None } else { Some(batch_mean(tape, &att2)?) },
        bg: batch_mean(tape, &bg)?,
        decorr: batch_mean(tape, &decorr)?,
        tv: batch_mean(tape, &tv)?,
        eq,
        p: loss_presence(tape, &clean)?,
        ent: batch_mean(tape, &ent)?,
    };
    let (total, breakdown) = total_loss(tape, &terms, loss_cfg)?;
    let all = tape.concat_rows(&clean)?;
    let peaks = tape.max_axis(all, 0)?;
    Ok((total, breakdown, tape.value(peaks).data().to_vec()))
}

/// Scales the gradients whose names start with `prefix` so their joint norm
/// is at most `max_norm`.
fn clip_group(grads: &mut ParamStore, prefix: &str, max_norm: f64) {
    let norm = grads
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .flat_map(|(_, g)| g.data())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Trains `params` (`s1.*`, plus `s2.*` in two-stage modes) in place on
/// samples whose features come from the frozen `backbone`.
///
/// Randomness: shuffling, Gumbel noise and equivariance transforms use
/// separate streams of `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train(
    params: &mut ParamStore,
    backbone: &ParamStore,
    vit: &ViTConfig,
    data: &[TrainSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    mode: Mode,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut shuffle = Rng::new(seed, 10);
    let mut gumbel = Rng::new(seed, 11);
    let mut affine = Rng::new(seed, 12);
    let batches = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches;
    let scale = sqrt_scaled(1.0, cfg.batch_size, cfg.base_batch);
    let mut opt = AdamW::new(cfg.adamw.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut sums = [0.0; 9];
        let mut peaks = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| data[i]).collect();
            let theta = (loss_cfg.lambda_eq > 0.0).then(|| random_affine(&mut affine));
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |n| cfg.base_rate(n, mode).is_some());
            let diverged = |msg: String| Error::Divergence(format!("epoch {epoch}, batch {b}: {msg}"));
            let (loss, breakdown, p) = batch_objective(
                &mut tape,
                &bound,
                backbone,
                vit,
                &batch,
                mode,
                loss_cfg,
                cfg.temperature,
                &mut gumbel,
                theta.as_ref(),
            )
            .map_err(|e| match e {
                Error::Autodiff(a) => diverged(a.to_string()),
                other => other,
            })?;
            if !breakdown.total.is_finite() {
                return Err(diverged(format!("non-finite loss {breakdown:?}")));
            }
            let grads = tape.backward(loss).map_err(|e| diverged(e.to_string()))?;
            let mut grads = bound.gradients(&tape, &grads);
            clip_group(&mut grads, "s1.", cfg.clip);
            clip_group(&mut grads, "s2.", cfg.clip);
            let decay = cosine_lr(scale, step, total_steps);
            opt.step(params, &grads, |n| cfg.base_rate(n, mode).map(|r| r * decay));
            for (s, v) in sums.iter_mut().zip(breakdown.values()) {
                *s += v;
            }
            peaks = p;
            step += 1;
        }
        let m = |i: usize| sums[i] / batches as f64;
        let log = EpochLog {
            epoch,
            losses: LossBreakdown {
                att1: m(0),
                att2: m(1),
                bg: m(2),
                decorr: m(3),
                tv: m(4),
                eq: m(5),
                p: m(6),
                ent: m(7),
                total: m(8),
            },
            part_peaks: peaks,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
