use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::warp::{similarity, Affine, WarpPlan};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::PartEmbeddings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrthogonalityVariant {
    /// Background separation plus a penalty on centered foreground cosines.
    Decorrelated,
    /// Squared cosines between all raw part vectors, background included.
    Legacy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda_orth: f64,
    pub lambda_tv: f64,
    pub lambda_eq: f64,
    pub lambda_p: f64,
    pub lambda_ent: f64,
    pub eps: f64,
    pub orthogonality: OrthogonalityVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_orth: 1.0,
            lambda_tv: 0.5,
            lambda_eq: 1.0,
            lambda_p: 1.0,
            lambda_ent: 0.1,
            eps: 1e-8,
            orthogonality: OrthogonalityVariant::Decorrelated,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_orth, self.lambda_tv, self.lambda_eq, self.lambda_p, self.lambda_ent];
        if lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {lambdas:?}")));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// Mean binary cross-entropy between routed logits and 0/1 labels.
pub fn loss_attr(tape: &mut Tape, logits: Var, y: &[f64]) -> Result<Var> {
    if let Some(bad) = y.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(Error::Config(format!("attribute labels must be 0 or 1, got {bad}")));
    }
    Ok(tape.bce_with_logits(logits, y)?)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(zero(tape));
    }
    let stacked = tape.concat_rows(terms)?;
    Ok(tape.mean(stacked))
}

fn squared_cosine(tape: &mut Tape, a: Var, b: Var, eps: f64) -> Result<Var> {
    let c = tape.cosine(a, b, eps)?;
    Ok(tape.square(c)?)
}

/// `(L_bg, L_decorr)`.
///
/// Decorrelated: `L_bg` is the mean squared cosine between the background and
/// each foreground vector; `L_decorr` averages squared cosines between every
/// ordered pair of distinct centered foreground vectors `u^k = v^k - mean(v)`.
/// Legacy: `L_bg = 0` and `L_decorr` is the mean squared cosine over all
/// unordered pairs of raw vectors, background included. Every cosine uses
/// `a·b / (|a||b| + eps)`; with fewer than two foreground parts `L_decorr = 0`.
pub fn loss_orthogonality(tape: &mut Tape, parts: &PartEmbeddings, cfg: &LossConfig) -> Result<(Var, Var)> {
    let k = parts.parts;
    let rows: Vec<Var> = (0..=k).map(|i| tape.slice_rows(parts.v, i, 1)).collect::<std::result::Result<_, _>>()?;
    match cfg.orthogonality {
        OrthogonalityVariant::Legacy => {
            let mut terms = Vec::new();
            for i in 0..=k {
                for j in i + 1..=k {
                    terms.push(squared_cosine(tape, rows[i], rows[j], cfg.eps)?);
                }
            }
            let decorr = mean_of(tape, &terms)?;
            Ok((zero(tape), decorr))
        }
        OrthogonalityVariant::Decorrelated => {
            let bg = rows[k];
            let bg_terms =
                (0..k).map(|i| squared_cosine(tape, bg, rows[i], cfg.eps)).collect::<Result<Vec<_>>>()?;
            let l_bg = mean_of(tape, &bg_terms)?;
            if k < 2 {
                return Ok((l_bg, zero(tape)));
            }
            let fg = parts.foreground(tape)?;
            let total = tape.sum_axis(fg, 0)?;
            let mu = tape.scale(total, 1.0 / k as f64);
            let u = tape.sub(fg, mu)?;
            let mut terms = Vec::new();
            for i in 0..k {
                let ui = tape.slice_rows(u, i, 1)?;
                for j in i + 1..k {
                    let uj = tape.slice_rows(u, j, 1)?;
                    terms.push(squared_cosine(tape, ui, uj, cfg.eps)?);
                }
            }
            // each unordered pair stands for two ordered ones
            Ok((l_bg, mean_of(tape, &terms)?))
        }
    }
}

/// Mean absolute horizontal and vertical first difference of the foreground
/// maps (`[H*W x (K+1)]` on a `grid x grid` lattice), pooled over all
/// differences.
pub fn loss_tv(tape: &mut Tape, maps: Var, grid: usize) -> Result<Var> {
    let k = tape.shape(maps)[1] - 1;
    if k == 0 || grid < 2 {
        return Ok(zero(tape));
    }
    let fg = tape.slice_cols(maps, 0, k)?;
    let mut from = Vec::new();
    let mut to = Vec::new();
    for r in 0..grid {
        for c in 0..grid - 1 {
            from.push(r * grid + c);
            to.push(r * grid + c + 1);
        }
    }
    for r in 0..grid - 1 {
        for c in 0..grid {
            from.push(r * grid + c);
            to.push((r + 1) * grid + c);
        }
    }
    let a = tape.gather_rows(fg, &from)?;
    let b = tape.gather_rows(fg, &to)?;
    let d = tape.sub(b, a)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

/// Random similarity transform: rotation up to 30 degrees, translation up to
/// 10% of the side, scale in `[0.9, 1.1]`.
pub fn random_affine(rng: &mut Rng) -> Affine {
    let rotation = rng.uniform(-30.0, 30.0).to_radians();
    let scale = rng.uniform(0.9, 1.1);
    // normalized coordinates span 2 units per side
    let tx = rng.uniform(-0.2, 0.2);
    let ty = rng.uniform(-0.2, 0.2);
    similarity(rotation, scale, tx, ty)
}

/// Mean squared difference between the maps of the transformed image and the
/// transformed maps, over grid cells whose sampling point lies inside the
/// image and all `K+1` channels. Zero when no cell is valid.
pub fn loss_equivariance(tape: &mut Tape, maps_of_warped: Var, maps: Var, plan: &Arc<WarpPlan>) -> Result<Var> {
    let valid: Vec<f64> = plan.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let count: f64 = valid.iter().sum();
    if count == 0.0 {
        return Ok(zero(tape));
    }
    let channels = tape.shape(maps)[1];
    let warped = tape.affine_warp_with(maps, plan.clone())?;
    let diff = tape.sub(maps_of_warped, warped)?;
    let sq = tape.square(diff)?;
    let mask = tape.constant(Tensor::new(&[valid.len(), 1], valid)?);
    let masked = tape.mul(sq, mask)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, 1.0 / (count * channels as f64)))
}

/// `(1/(K+1)) Σ_k (1 - max over batch and space of a^k)`, background included.
pub fn loss_presence(tape: &mut Tape, batch: &[Var]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Config("presence loss needs a non-empty batch".into()));
    }
    let all = tape.concat_rows(batch)?;
    let peak = tape.max_axis(all, 0)?;
    let m = tape.mean(peak);
    let neg = tape.neg(m);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Mean per-pixel Shannon entropy (nats) of the `K+1` assignment.
pub fn loss_entropy(tape: &mut Tape, maps: Var) -> Result<Var> {
    let rows = tape.shape(maps)[0] as f64;
    let floored = tape.clamp_min(maps, 1e-12);
    let logs = tape.log(floored);
    let plogp = tape.mul(maps, logs)?;
    let total = tape.sum(plogp);
    Ok(tape.scale(total, -1.0 / rows))
}

/// Loss components recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub att1: Var,
    /// Absent in single-stage mode.
    pub att2: Option<Var>,
    pub bg: Var,
    pub decorr: Var,
    pub tv: Var,
    pub eq: Var,
    pub p: Var,
    pub ent: Var,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub att1: f64,
    pub att2: f64,
    pub bg: f64,
    pub decorr: f64,
    pub tv: f64,
    pub eq: f64,
    pub p: f64,
    pub ent: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 9] = ["att1", "att2", "bg", "decorr", "tv", "eq", "p", "ent", "total"];

    pub fn values(&self) -> [f64; 9] {
        [self.att1, self.att2, self.bg, self.decorr, self.tv, self.eq, self.p, self.ent, self.total]
    }

    /// The weighted sum of the components under `cfg`.
    pub fn weighted(&self, cfg: &LossConfig) -> f64 {
        self.att1
            + self.att2
            + cfg.lambda_orth * (self.bg + self.decorr)
            + cfg.lambda_tv * self.tv
            + cfg.lambda_eq * self.eq
            + cfg.lambda_p * self.p
            + cfg.lambda_ent * self.ent
    }
}

/// `L = L_att1 + L_att2 + λ⊥(L_bg + L_decorr) + λtv L_tv + λeq L_eq + λp L_p
/// + λent L_ent`, on the tape and as plain numbers.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, cfg: &LossConfig) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    let scalar = |tape: &Tape, v: Var| tape.value(v).data()[0];
    let mut parts = vec![terms.att1];
    if let Some(a2) = terms.att2 {
        parts.push(a2);
    }
    let orth = tape.add(terms.bg, terms.decorr)?;
    for (v, w) in [(orth, cfg.lambda_orth), (terms.tv, cfg.lambda_tv), (terms.eq, cfg.lambda_eq), (terms.p, cfg.lambda_p), (terms.ent, cfg.lambda_ent)] {
        parts.push(tape.scale(v, w));
    }
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = tape.add(total, p)?;
    }
    let breakdown = LossBreakdown {
        att1: scalar(tape, terms.att1),
        att2: terms.att2.map_or(0.0, |v| scalar(tape, v)),
        bg: scalar(tape, terms.bg),
        decorr: scalar(tape, terms.decorr),
        tv: scalar(tape, terms.tv),
        eq: scalar(tape, terms.eq),
        p: scalar(tape, terms.p),
        ent: scalar(tape, terms.ent),
        total: scalar(tape, total),
    };
    Ok((total, breakdown))
}

/// Sum of Stage-1 and Stage-2 logits.
pub fn ensemble_logits(stage1: &[f64], stage2: &[f64]) -> Result<Vec<f64>> {
    if stage1.len() != stage2.len() {
        return Err(Error::Config(format!("{} vs {} logits", stage1.len(), stage2.len())));
    }
    Ok(stage1.iter().zip(stage2).map(|(a, b)| a + b).collect())
}
