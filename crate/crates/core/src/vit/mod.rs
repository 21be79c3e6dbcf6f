//! A minimal Vision Transformer whose prefix tokens can be replicated per part
//! and whose self-attention can be restricted to part cliques.
//!
//! Token order is always: prefix groups first (group `p` occupies rows
//! `p*(1+R) .. (p+1)*(1+R)`, CLS then `R` registers), then the `H*W` patch
//! tokens in row-major order. Patch features are kept token-major, i.e. `z`
//! is stored as `[H*W x D]` rather than `[D x H x W]`.

mod forward;
mod mask;

pub use forward::{vit_forward, FeatureMap};
pub use mask::{build_clique_mask, masked_attention, AttentionMask, MaskVariant, SOFT_FLOOR};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::Rng;

pub const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_registers: usize,
    pub mlp_ratio: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 3,
            heads: 4,
            num_registers: 1,
            mlp_ratio: 4,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} must be divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return fail("channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Prefix tokens per group: CLS plus registers.
    pub fn prefix_per_group(&self) -> usize {
        1 + self.num_registers
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| std * rng.normal()).collect()).expect("valid shape")
}

/// Freshly initialized backbone parameters with a single prefix group.
pub fn init_params(cfg: &ViTConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    let mut p = ParamStore::new();
    p.insert("patch_embed.w", normal(&[cfg.patch_dim(), d], INIT_STD, rng));
    p.insert("patch_embed.b", Tensor::zeros(&[d]));
    p.insert("pos_embed", normal(&[cfg.num_patches(), d], INIT_STD, rng));
    p.insert("prefix", normal(&[cfg.prefix_per_group(), d], INIT_STD, rng));
    for l in 0..cfg.depth {
        let b = format!("blocks.{l}");
        p.insert(format!("{b}.ln1.g"), Tensor::ones(&[d]));
        p.insert(format!("{b}.ln1.b"), Tensor::zeros(&[d]));
        p.insert(format!("{b}.attn.qkv.w"), normal(&[d, 3 * d], INIT_STD, rng));
        p.insert(format!("{b}.attn.qkv.b"), Tensor::zeros(&[3 * d]));
        p.insert(format!("{b}.attn.proj.w"), normal(&[d, d], INIT_STD, rng));
        p.insert(format!("{b}.attn.proj.b"), Tensor::zeros(&[d]));
        p.insert(format!("{b}.ln2.g"), Tensor::ones(&[d]));
        p.insert(format!("{b}.ln2.b"), Tensor::zeros(&[d]));
        p.insert(format!("{b}.mlp.fc1.w"), normal(&[d, hidden], INIT_STD, rng));
        p.insert(format!("{b}.mlp.fc1.b"), Tensor::zeros(&[hidden]));
        p.insert(format!("{b}.mlp.fc2.w"), normal(&[hidden, d], INIT_STD, rng));
        p.insert(format!("{b}.mlp.fc2.b"), Tensor::zeros(&[d]));
    }
    p.insert("norm.g", Tensor::ones(&[d]));
    p.insert("norm.b", Tensor::zeros(&[d]));
    Ok(p)
}

/// Splits a `[C x h x w]` image into `[H*W x C*p*p]` patch rows, top-to-bottom
/// and left-to-right; each row is channel-major, then pixel row, then column.
pub fn patchify(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if image.shape() != [c, s, s] {
        return Err(Error::Config(format!("image shape {:?} does not match {c}x{s}x{s}", image.shape())));
    }
    let g = cfg.grid();
    let x = image.data();
    let mut out = Vec::with_capacity(x.len());
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * s + gy * p + dy) * s + gx * p;
                    out.extend_from_slice(&x[row..row + p]);
                }
            }
        }
    }
    Ok(Tensor::new(&[g * g, cfg.patch_dim()], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    let g = cfg.grid();
    if patches.shape() != [g * g, cfg.patch_dim()] {
        return Err(Error::Config(format!("patch tensor shape {:?} does not match config", patches.shape())));
    }
    let mut out = vec![0.0; c * s * s];
    let src = patches.data();
    let mut k = 0;
    for gy in 0..g {
        for gx in 0..g {
            for ch in 0..c {
                for dy in 0..p {
                    let row = (ch * s + gy * p + dy) * s + gx * p;
                    out[row..row + p].copy_from_slice(&src[k..k + p]);
                    k += p;
                }
            }
        }
    }
    Ok(Tensor::new(&[c, s, s], out)?)
}

/// Replicates one prefix group (`[(1+R) x D]`) into `parts + 1` identical
/// groups, one per discovered part plus the background.
pub fn replicate_prefix(prefix: &Tensor, cfg: &ViTConfig, parts: usize) -> Result<Tensor> {
    if parts == 0 {
        return Err(Error::Config("replicate_prefix needs at least one part".into()));
    }
    let per = cfg.prefix_per_group();
    if prefix.shape() != [per, cfg.embed_dim] {
        return Err(Error::Config(format!(
            "prefix shape {:?}, expected [{per}, {}]",
            prefix.shape(),
            cfg.embed_dim
        )));
    }
    let mut data = Vec::with_capacity((parts + 1) * prefix.len());
    for _ in 0..=parts {
        data.extend_from_slice(prefix.data());
    }
    Ok(Tensor::new(&[(parts + 1) * per, cfg.embed_dim], data)?)
}

/// Backbone parameters with the prefix bank replicated for `parts` parts.
pub fn with_replicated_prefix(params: &ParamStore, cfg: &ViTConfig, parts: usize) -> Result<ParamStore> {
    let mut out = params.clone();
    let bank = replicate_prefix(params.get("prefix")?, cfg, parts)?;
    out.insert("prefix", bank);
    Ok(out)
}
