use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::Scope;

use super::mask::{attend, resolve, StreamMask};
use super::{patchify, AttentionMask, ViTConfig, LN_EPS};
use crate::autodiff::Tensor;

/// Output of [`vit_forward`].
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    /// Patch features `z`, token-major `[H*W x D]`.
    pub patches: Var,
    /// Prefix outputs `[groups*(1+R) x D]`.
    pub prefix: Var,
    pub per_group: usize,
}

impl FeatureMap {
    /// CLS output of prefix group `group`.
    pub fn cls(&self, tape: &mut Tape, group: usize) -> Result<Var> {
        Ok(tape.slice_rows(self.prefix, group * self.per_group, 1)?)
    }

    /// CLS outputs of the first `groups` groups stacked as `[groups x D]`.
    pub fn cls_rows(&self, tape: &mut Tape, groups: usize) -> Result<Var> {
        let index: Vec<usize> = (0..groups).map(|g| g * self.per_group).collect();
        Ok(tape.gather_rows(self.prefix, &index)?)
    }
}

pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

fn block(tape: &mut Tape, p: &Scope, cfg: &ViTConfig, x: Var, mask: &StreamMask) -> Result<Var> {
    let d = cfg.embed_dim;
    let h = tape.layer_norm(x, p.get("ln1.g")?, p.get("ln1.b")?, LN_EPS)?;
    let qkv = linear(tape, h, p.get("attn.qkv.w")?, p.get("attn.qkv.b")?)?;
    let q = tape.slice_cols(qkv, 0, d)?;
    let k = tape.slice_cols(qkv, d, d)?;
    let v = tape.slice_cols(qkv, 2 * d, d)?;
    let attn = attend(tape, q, k, v, cfg.heads, mask)?;
    let attn = linear(tape, attn, p.get("attn.proj.w")?, p.get("attn.proj.b")?)?;
    let x = tape.add(x, attn)?;
    let h = tape.layer_norm(x, p.get("ln2.g")?, p.get("ln2.b")?, LN_EPS)?;
    let h = linear(tape, h, p.get("mlp.fc1.w")?, p.get("mlp.fc1.b")?)?;
    let h = tape.gelu(h);
    let h = linear(tape, h, p.get("mlp.fc2.w")?, p.get("mlp.fc2.b")?)?;
    Ok(tape.add(x, h)?)
}

fn stream(tape: &mut Tape, p: &Scope, cfg: &ViTConfig, tokens: Var, mask: &StreamMask) -> Result<Var> {
    let mut x = tokens;
    for l in 0..cfg.depth {
        x = block(tape, &p.scope(&format!("blocks.{l}")), cfg, x, mask)?;
    }
    Ok(tape.layer_norm(x, p.get("norm.g")?, p.get("norm.b")?, LN_EPS)?)
}

/// Runs the ViT on one `[C x h x w]` image.
///
/// Each layer is `x + Attn(LN(x))` followed by `x + MLP(LN(x))` with a GELU
/// MLP, and a final norm is applied to every output token; positional
/// embeddings are added to patch tokens only. The `prefix`
/// parameter must hold `mask.groups * (1+R)` rows.
///
/// Under [`crate::vit::MaskVariant::Ste`] the whole stack is evaluated twice,
/// once per mask, from the same embedded tokens; the outputs are joined with
/// a straight-through node so values come from the hard stream and gradients
/// from the soft one.
pub fn vit_forward(tape: &mut Tape, p: &Scope, cfg: &ViTConfig, image: &Tensor, mask: &AttentionMask) -> Result<FeatureMap> {
    let patches = tape.constant(patchify(image, cfg)?);
    let embedded = linear(tape, patches, p.get("patch_embed.w")?, p.get("patch_embed.b")?)?;
    let embedded = tape.add(embedded, p.get("pos_embed")?)?;
    let prefix = p.get("prefix")?;
    let num_prefix = mask.groups * cfg.prefix_per_group();
    if tape.shape(prefix)[0] != num_prefix || mask.per_group != cfg.prefix_per_group() {
        return Err(Error::Config(format!(
            "prefix bank has {} rows, mask expects {num_prefix}",
            tape.shape(prefix)[0]
        )));
    }
    let tokens = tape.concat_rows(&[prefix, embedded])?;
    let count = num_prefix + cfg.num_patches();
    let (primary, gradient) = resolve(tape, mask, count)?;
    let mut out = stream(tape, p, cfg, tokens, &primary)?;
    if let Some(soft) = gradient {
        let s = stream(tape, p, cfg, tokens, &soft)?;
        out = tape.straight_through(out, s)?;
    }
    Ok(FeatureMap {
        prefix: tape.slice_rows(out, 0, num_prefix)?,
        patches: tape.slice_rows(out, num_prefix, cfg.num_patches())?,
        per_group: cfg.prefix_per_group(),
    })
}
