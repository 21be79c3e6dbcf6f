use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::partmodel::frozen_features;
use crate::vit::{vit_forward, with_replicated_prefix, AttentionMask, ViTConfig};

/// Part vectors of one image, `v[k]` of length `D`. `empty` lists the parts
/// whose mask (late) or clique (early) held no patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PartFeatures {
    pub v: Vec<Vec<f64>>,
    pub empty: Vec<usize>,
}

/// Mask-weighted average of patch features `z` (`[H*W x D]`) for each binary
/// patch mask. An empty mask yields the zero vector and a warning.
pub fn late_pool(z: &Tensor, masks: &[Vec<bool>]) -> Result<PartFeatures> {
    let (hw, d) = (z.rows(), z.last_dim());
    let mut v = Vec::with_capacity(masks.len());
    let mut empty = Vec::new();
    for (k, m) in masks.iter().enumerate() {
        if m.len() != hw {
            return Err(Error::Config(format!("mask {k} has {} cells, features have {hw} patches", m.len())));
        }
        let mut acc = vec![0.0; d];
        let mut weight = 0usize;
        for (i, _) in m.iter().enumerate().filter(|(_, &on)| on) {
            acc.iter_mut().zip(z.row(i)).for_each(|(a, x)| *a += x);
            weight += 1;
        }
        if weight == 0 {
            log::warn!("late masking: part {k} has an empty mask, using a zero vector");
            empty.push(k);
        } else {
            acc.iter_mut().for_each(|a| *a /= weight as f64);
        }
        v.push(acc);
    }
    Ok(PartFeatures { v, empty })
}

/// Late masking: unmasked frozen forward pass, then [`late_pool`].
pub fn extract_late(backbone: &ParamStore, cfg: &ViTConfig, image: &Tensor, masks: &[Vec<bool>]) -> Result<PartFeatures> {
    late_pool(&frozen_features(backbone, cfg, image)?, masks)
}

/// Hard patch labels from binary masks: each patch goes to the first mask
/// containing it, patches outside every mask to the background label
/// `masks.len()`.
pub fn patch_labels(masks: &[Vec<bool>], patches: usize) -> Result<Vec<usize>> {
    if let Some(m) = masks.iter().find(|m| m.len() != patches) {
        return Err(Error::Config(format!("mask has {} cells, expected {patches}", m.len())));
    }
    Ok((0..patches).map(|i| masks.iter().position(|m| m[i]).unwrap_or(masks.len())).collect())
}

/// Early masking: the backbone with its prefix replicated for `parts` parts
/// runs under the hard clique mask given by `labels` (`0..parts`, `parts` is
/// the background); part `k` is represented by its CLS output.
pub fn extract_early(
    backbone: &ParamStore,
    cfg: &ViTConfig,
    image: &Tensor,
    labels: &[usize],
    parts: usize,
) -> Result<PartFeatures> {
    let params = with_replicated_prefix(backbone, cfg, parts)?;
    let mask = AttentionMask::from_cliques(labels.to_vec(), parts + 1, cfg.prefix_per_group())?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let out = vit_forward(&mut tape, &bound.root(), cfg, image, &mask)?;
    let cls = out.cls_rows(&mut tape, parts)?;
    let cls = tape.value(cls);
    let empty: Vec<usize> = (0..parts).filter(|k| !labels.contains(k)).collect();
    for k in &empty {
        log::warn!("early masking: part {k} has an empty clique, its CLS sees only its own prefix");
    }
    Ok(PartFeatures { v: (0..parts).map(|k| cls.row(k).to_vec()).collect(), empty })
}
