use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Scope};
use crate::rng::Rng;
use crate::vit::{build_clique_mask, vit_forward, with_replicated_prefix, FeatureMap, MaskVariant, ViTConfig};

use super::{attribute_scores, softmax_routing, RoutingResult, HEAD_STD};

/// Fresh Stage-2 parameters (unprefixed): a copy of `backbone` with its
/// prefix bank replicated for `parts` parts under `vit.`, plus its own shared
/// norm and head.
pub fn init_stage2(backbone: &ParamStore, cfg: &ViTConfig, parts: usize, attributes: usize, rng: &mut Rng) -> Result<ParamStore> {
    let d = cfg.embed_dim;
    let mut p = with_replicated_prefix(backbone, cfg, parts)?.with_prefix("vit");
    p.insert("ln.g", Tensor::ones(&[d]));
    p.insert("ln.b", Tensor::zeros(&[d]));
    p.insert("head.w", Tensor::new(&[d, attributes], (0..d * attributes).map(|_| HEAD_STD * rng.normal()).collect())?);
    p.insert("head.b", Tensor::zeros(&[attributes]));
    Ok(p)
}

#[derive(Clone, Copy, Debug)]
pub struct Stage2Output {
    pub features: FeatureMap,
    /// CLS output of each foreground part, `[K x D]`.
    pub cls: Var,
    pub routing: RoutingResult,
}

/// Clique-masked re-encoding of `image` driven by Stage-1 maps `[H*W x (K+1)]`.
/// Only the `K` foreground CLS outputs feed the head and the routing.
pub fn stage2_forward(
    tape: &mut Tape,
    p: &Scope,
    cfg: &ViTConfig,
    image: &Tensor,
    maps: Var,
    variant: MaskVariant,
) -> Result<Stage2Output> {
    if variant == MaskVariant::Full {
        return Err(Error::Config("stage 2 needs a soft, hard or ste mask".into()));
    }
    let parts = tape.shape(maps)[1] - 1;
    let mask = build_clique_mask(tape, maps, variant, cfg.prefix_per_group())?;
    let features = vit_forward(tape, &p.scope("vit"), cfg, image, &mask)?;
    let cls = features.cls_rows(tape, parts)?;
    let scores = attribute_scores(tape, p, cls)?;
    let routing = softmax_routing(tape, scores)?;
    Ok(Stage2Output { features, cls, routing })
}
