//! Two-stage part model.
//!
//! Stage 1 compares frozen backbone patch features with learnable prototypes
//! to get part maps, pools part embeddings, and predicts attributes per part
//! through a shared norm and head, routed by a softmax over parts. Stage 2
//! re-encodes the image with a ViT whose prefix tokens are replicated per part
//! and whose attention is confined to the cliques given by the Stage-1 maps.
//!
//! Parameter names: Stage 1 lives under `s1.` (`proto`, `ln.g`, `ln.b`,
//! `head.w`, `head.b`), Stage 2 under `s2.` (`vit.*`, `ln.*`, `head.*`).

mod losses;
mod stage2;
mod train;

pub use losses::{
    ensemble_logits, loss_attr, loss_entropy, loss_equivariance, loss_orthogonality, loss_presence, loss_tv,
    random_affine, total_loss, LossBreakdown, LossConfig, LossTerms, OrthogonalityVariant,
};
pub use stage2::{init_stage2, stage2_forward, Stage2Output};
pub use train::{batch_objective, train, EpochLog, Mode, TrainConfig, TrainSample};

use crate::autodiff::{gumbel_softmax, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::rng::Rng;
use crate::vit::{vit_forward, AttentionMask, ViTConfig, LN_EPS};

const HEAD_STD: f64 = 0.02;

/// Part maps of one image, token-major `[H*W x (K+1)]`, background last.
#[derive(Clone, Copy, Debug)]
pub struct PartMaps {
    /// Used for pooling: straight-through one-hot Gumbel samples in training,
    /// the softmax at evaluation.
    pub maps: Var,
    /// Relaxed assignment: the Gumbel-Softmax sample in training, the
    /// softmax at evaluation. Feeds Stage-2 masks.
    pub soft: Var,
    /// Noise-free softmax, used by the shaping losses.
    pub clean: Var,
}

/// Pooled part vectors `[(K+1) x D]`, background in the last row.
#[derive(Clone, Copy, Debug)]
pub struct PartEmbeddings {
    pub v: Var,
    pub parts: usize,
}

impl PartEmbeddings {
    pub fn foreground(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.slice_rows(self.v, 0, self.parts)?)
    }

    pub fn background(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.slice_rows(self.v, self.parts, 1)?)
    }
}

/// Softmax routing outputs for one sample.
#[derive(Clone, Copy, Debug)]
pub struct RoutingResult {
    /// `S[c, k]`, `[A x K]`.
    pub scores: Var,
    /// `W[c, k]`, rows sum to 1.
    pub weights: Var,
    /// `ŷ[c]`, `[A]`.
    pub logits: Var,
}

/// Fresh Stage-1 parameters (unprefixed): prototypes `[(K+1) x D]`, shared
/// norm and a single linear head `[D x A]`.
pub fn init_stage1(d: usize, parts: usize, attributes: usize, rng: &mut Rng) -> Result<ParamStore> {
    if parts == 0 || attributes == 0 {
        return Err(Error::Config("stage 1 needs at least one part and one attribute".into()));
    }
    let mut p = ParamStore::new();
    let n = (parts + 1) * d;
    p.insert("proto", Tensor::new(&[parts + 1, d], (0..n).map(|_| rng.normal()).collect())?);
    p.insert("ln.g", Tensor::ones(&[d]));
    p.insert("ln.b", Tensor::zeros(&[d]));
    p.insert("head.w", Tensor::new(&[d, attributes], (0..d * attributes).map(|_| HEAD_STD * rng.normal()).collect())?);
    p.insert("head.b", Tensor::zeros(&[attributes]));
    Ok(p)
}

/// Patch features of the frozen backbone (full attention, single prefix
/// group), `[H*W x D]`.
pub fn frozen_features(backbone: &ParamStore, cfg: &ViTConfig, image: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = backbone.bind(&mut tape, |_| false);
    let out = vit_forward(&mut tape, &bound.root(), cfg, image, &AttentionMask::full(cfg.prefix_per_group()))?;
    Ok(tape.value(out.patches).clone())
}

/// Per-pixel part assignment from scaled dot products `z·p / sqrt(D)`.
///
/// `sampling = Some((rng, temperature))` selects training behaviour
/// (hard straight-through Gumbel-Softmax); `None` is evaluation.
pub fn part_attention_maps(tape: &mut Tape, z: Var, proto: Var, sampling: Option<(&mut Rng, f64)>) -> Result<PartMaps> {
    let d = tape.shape(z)[1];
    if tape.shape(proto)[1] != d {
        return Err(Error::Config(format!("prototype width {} != feature width {d}", tape.shape(proto)[1])));
    }
    let raw = tape.matmul_nt(z, proto)?;
    let logits = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let clean = tape.softmax(logits)?;
    Ok(match sampling {
        Some((rng, temperature)) => {
            let (maps, soft) = gumbel_softmax(tape, logits, temperature, rng, true)?;
            PartMaps { maps, soft, clean }
        }
        None => PartMaps { maps: clean, soft: clean, clean },
    })
}

/// `v^k = (1/HW) Σ_ij a^k_ij z_ij` for every map including the background.
pub fn pool_parts(tape: &mut Tape, maps: Var, z: Var) -> Result<PartEmbeddings> {
    let hw = tape.shape(maps)[0];
    if tape.shape(z)[0] != hw {
        return Err(Error::Config(format!("{hw} map rows vs {} feature rows", tape.shape(z)[0])));
    }
    let parts = tape.shape(maps)[1] - 1;
    let at = tape.transpose(maps)?;
    let sum = tape.matmul(at, z)?;
    Ok(PartEmbeddings { v: tape.scale(sum, 1.0 / hw as f64), parts })
}

/// Shared norm followed by the shared linear head, applied to each row of
/// `v` (`[K x D]`); returns `S` as `[A x K]`.
pub fn attribute_scores(tape: &mut Tape, p: &Scope, v: Var) -> Result<Var> {
    let normed = tape.layer_norm(v, p.get("ln.g")?, p.get("ln.b")?, LN_EPS)?;
    let proj = tape.matmul(normed, p.get("head.w")?)?;
    let s = tape.add(proj, p.get("head.b")?)?;
    Ok(tape.transpose(s)?)
}

/// `W = softmax_k(S)`, `ŷ_c = Σ_k W[c,k] S[c,k]` for `S` of shape `[A x K]`.
pub fn softmax_routing(tape: &mut Tape, scores: Var) -> Result<RoutingResult> {
    let weights = tape.softmax(scores)?;
    let prod = tape.mul(weights, scores)?;
    let logits = tape.sum_axis(prod, 1)?;
    Ok(RoutingResult { scores, weights, logits })
}

#[derive(Clone, Copy, Debug)]
pub struct Stage1Output {
    pub maps: PartMaps,
    pub parts: PartEmbeddings,
    pub routing: RoutingResult,
}

/// Stage 1 on precomputed frozen features `z` (`[H*W x D]`).
pub fn stage1_forward(tape: &mut Tape, p: &Scope, z: Var, sampling: Option<(&mut Rng, f64)>) -> Result<Stage1Output> {
    let maps = part_attention_maps(tape, z, p.get("proto")?, sampling)?;
    let parts = pool_parts(tape, maps.maps, z)?;
    let fg = parts.foreground(tape)?;
    let scores = attribute_scores(tape, p, fg)?;
    let routing = softmax_routing(tape, scores)?;
    Ok(Stage1Output { maps, parts, routing })
}

/// Hard per-patch part labels (argmax, ties to the lowest index) of
/// evaluation-mode Stage-1 maps.
pub fn stage1_labels(stage1: &ParamStore, z: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let bound = stage1.bind(&mut tape, |_| false);
    let zv = tape.constant(z.clone());
    let maps = part_attention_maps(&mut tape, zv, bound.get("proto")?, None)?;
    let a = tape.value(maps.clean);
    Ok((0..a.rows()).map(|r| crate::autodiff::argmax(a.row(r))).collect())
}
