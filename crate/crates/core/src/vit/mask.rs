//! Part-clique attention masks.
//!
//! Every token has a clique: prefix group `p` belongs to clique `p`, a patch
//! to the argmax of its row of the part maps `A` (background is the last
//! column). Keys additionally carry a soft membership `m_k` over the `K+1`
//! groups: one-hot for prefix tokens, the row of `A` for patches.
//!
//! * `Hard`: a query attends only to keys of its own clique; other keys are
//!   excluded from the softmax normalization altogether.
//! * `Soft`: the logit of key `k` for a query in clique `c` is biased by
//!   `ln(max(m_k[c], SOFT_FLOOR))`, added after the `1/sqrt(d)` scaling.
//! * `Ste`: hard forward values with the soft variant's gradients.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound on the soft co-membership weight before taking its log.
pub const SOFT_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskVariant {
    Full,
    Soft,
    Hard,
    Ste,
}

#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub variant: MaskVariant,
    /// Number of prefix groups (`K+1` for part masks, 1 for a plain backbone).
    pub groups: usize,
    /// Prefix tokens per group (CLS plus registers).
    pub per_group: usize,
    /// Hard clique of every patch; empty for an unrestricted mask.
    pub patch_clique: Vec<usize>,
    /// Part maps `[H*W x groups]` feeding the soft bias.
    pub soft_maps: Option<Var>,
}

impl AttentionMask {
    /// Unrestricted attention over a single prefix group.
    pub fn full(per_group: usize) -> Self {
        Self { variant: MaskVariant::Full, groups: 1, per_group, patch_clique: Vec::new(), soft_maps: None }
    }

    /// Hard clique mask from explicit patch labels in `0..groups`.
    pub fn from_cliques(patch_clique: Vec<usize>, groups: usize, per_group: usize) -> Result<Self> {
        if let Some(&bad) = patch_clique.iter().find(|&&c| c >= groups) {
            return Err(Error::Config(format!("clique id {bad} out of range for {groups} groups")));
        }
        Ok(Self { variant: MaskVariant::Hard, groups, per_group, patch_clique, soft_maps: None })
    }

    pub fn num_prefix(&self) -> usize {
        self.groups * self.per_group
    }

    /// Clique id of every token (prefix tokens first). Only meaningful for
    /// hard-style masks.
    pub fn token_cliques(&self) -> Vec<usize> {
        (0..self.groups)
            .flat_map(|g| std::iter::repeat(g).take(self.per_group))
            .chain(self.patch_clique.iter().copied())
            .collect()
    }

    /// Row-major `[T x T]` allowed-key matrix of the hard mask.
    pub fn allowed(&self) -> Vec<bool> {
        let cliques = self.token_cliques();
        let mut out = Vec::with_capacity(cliques.len() * cliques.len());
        for &q in &cliques {
            out.extend(cliques.iter().map(|&k| k == q));
        }
        out
    }

    /// Additive soft bias `[T x T]`, recorded on the tape so it is
    /// differentiable in the part maps.
    pub fn soft_bias(&self, tape: &mut Tape) -> Result<Var> {
        let maps = self.soft_maps.ok_or_else(|| Error::Config("soft mask without part maps".into()))?;
        let cliques = self.token_cliques();
        let onehot = |rows: &[usize]| {
            let mut data = vec![0.0; rows.len() * self.groups];
            for (t, &c) in rows.iter().enumerate() {
                data[t * self.groups + c] = 1.0;
            }
            Tensor::new(&[rows.len(), self.groups], data)
        };
        let queries = tape.constant(onehot(&cliques)?);
        let prefix = tape.constant(onehot(&cliques[..self.num_prefix()])?);
        let keys = tape.concat_rows(&[prefix, maps])?;
        let weight = tape.matmul_nt(queries, keys)?;
        let floored = tape.clamp_min(weight, SOFT_FLOOR);
        Ok(tape.log(floored))
    }

    fn check_tokens(&self, tokens: usize) -> Result<()> {
        if self.variant != MaskVariant::Full && self.num_prefix() + self.patch_clique.len() != tokens {
            return Err(Error::Config(format!(
                "mask covers {} tokens, sequence has {tokens}",
                self.num_prefix() + self.patch_clique.len()
            )));
        }
        Ok(())
    }
}

/// Turns part maps `A` (`[H*W x (K+1)]`, rows summing to 1, column `K` the
/// background) into a clique mask. Each patch's hard clique is the argmax of
/// its row, ties going to the lowest part index.
pub fn build_clique_mask(tape: &Tape, maps: Var, variant: MaskVariant, per_group: usize) -> Result<AttentionMask> {
    let a = tape.value(maps);
    if a.ndim() != 2 {
        return Err(Error::Config(format!("part maps must be [H*W x (K+1)], got {:?}", a.shape())));
    }
    let groups = a.last_dim();
    let patch_clique = (0..a.rows()).map(|r| argmax(a.row(r))).collect();
    Ok(AttentionMask { variant, groups, per_group, patch_clique, soft_maps: Some(maps) })
}

/// The mask in the form one attention stream consumes.
#[derive(Clone, Debug)]
pub(crate) enum StreamMask {
    Full,
    Hard(Arc<[bool]>),
    Soft(Var),
}

/// Resolves `mask` into the stream(s) needed for a `tokens`-long sequence:
/// `(primary, straight-through gradient stream)`.
pub(crate) fn resolve(tape: &mut Tape, mask: &AttentionMask, tokens: usize) -> Result<(StreamMask, Option<StreamMask>)> {
    mask.check_tokens(tokens)?;
    Ok(match mask.variant {
        MaskVariant::Full => (StreamMask::Full, None),
        MaskVariant::Hard => (StreamMask::Hard(mask.allowed().into()), None),
        MaskVariant::Soft => (StreamMask::Soft(mask.soft_bias(tape)?), None),
        MaskVariant::Ste => (StreamMask::Hard(mask.allowed().into()), Some(StreamMask::Soft(mask.soft_bias(tape)?))),
    })
}

/// Multi-head scaled dot-product attention over `[T x D]` projections.
pub(crate) fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, mask: &StreamMask) -> Result<Var> {
    let d = tape.shape(q)[1];
    if d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let raw = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(raw, scale);
        let probs = match mask {
            StreamMask::Full => tape.softmax(scores)?,
            StreamMask::Hard(allowed) => tape.masked_softmax(scores, Some(allowed))?,
            StreamMask::Soft(bias) => {
                let biased = tape.add(scores, *bias)?;
                tape.softmax(biased)?
            }
        };
        outs.push(tape.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    Ok(tape.concat_cols(&outs)?)
}

/// `Attn(Q, K, V, M)` for `[T x D]` queries, keys and values.
///
/// For [`MaskVariant::Ste`] the result is `straight_through(H_hard, H_soft)`:
/// bit-identical to the hard output, differentiated like the soft one.
pub fn masked_attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize, mask: &AttentionMask) -> Result<Var> {
    let tokens = tape.shape(q)[0];
    let (primary, gradient) = resolve(tape, mask, tokens)?;
    let out = attend(tape, q, k, v, heads, &primary)?;
    match gradient {
        None => Ok(out),
        Some(soft) => {
            let s = attend(tape, q, k, v, heads, &soft)?;
            Ok(tape.straight_through(out, s)?)
        }
    }
}
