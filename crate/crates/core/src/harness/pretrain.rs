use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{ParamStore, Scope};
use crate::rng::Rng;
use crate::synth::Sample;
use crate::vit::{init_params, vit_forward, AttentionMask, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub adamw: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { epochs: 30, batch_size: 8, lr: 1e-3, clip: 2.0, adamw: AdamWConfig::default() }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr >= 0.0) || !(self.clip > 0.0) {
            return Err(Error::Config("pretrain needs a positive batch size and clip and a non-negative rate".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch: usize,
    pub loss: f64,
}

fn head_logits(tape: &mut Tape, p: &Scope, cls: Var) -> Result<Var> {
    let y = tape.matmul(cls, p.get("head.w")?)?;
    Ok(tape.add(y, p.get("head.b")?)?)
}

fn forward(tape: &mut Tape, p: &Scope, vit: &ViTConfig, image: &Tensor) -> Result<Var> {
    let out = vit_forward(tape, &p.scope("vit"), vit, image, &AttentionMask::full(vit.prefix_per_group()))?;
    let cls = out.cls(tape, 0)?;
    head_logits(tape, p, cls)
}

/// Attribute logits of the pretraining head (`vit.*` plus `head.*`).
pub fn cls_logits(params: &ParamStore, vit: &ViTConfig, image: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let y = forward(&mut tape, &bound.root(), vit, image)?;
    Ok(tape.value(y).data().to_vec())
}

/// Trains the toy backbone with full attention to predict every attribute
/// from its CLS token. Returns the full parameter set (`vit.*` backbone and
/// `head.*`) and per-epoch mean losses.
pub fn pretrain_backbone(
    vit: &ViTConfig,
    cfg: &PretrainConfig,
    data: &[Sample],
    seed: u64,
    mut on_epoch: impl FnMut(&PretrainLog),
) -> Result<(ParamStore, Vec<PretrainLog>)> {
    vit.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("no pretraining samples".into()));
    }
    let attributes = data[0].labels.len();
    let d = vit.embed_dim;
    let mut init = Rng::new(seed, 1);
    let mut params = init_params(vit, &mut init)?.with_prefix("vit");
    params.insert("head.w", Tensor::new(&[d, attributes], (0..d * attributes).map(|_| 0.02 * init.normal()).collect())?);
    params.insert("head.b", Tensor::zeros(&[attributes]));

    let mut shuffle = Rng::new(seed, 2);
    let mut opt = AdamW::new(cfg.adamw.clone());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batches = data.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * batches;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |msg: String| Error::Divergence(format!("pretrain epoch {epoch}, batch {b}: {msg}"));
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, |_| true);
            let p = bound.root();
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let y = forward(&mut tape, &p, vit, &data[i].image)?;
                losses.push(tape.bce_with_logits(y, &data[i].labels).map_err(|e| diverged(e.to_string()))?);
            }
            let stacked = tape.concat_rows(&losses)?;
            let loss = tape.mean(stacked);
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(diverged(format!("non-finite loss {value}")));
            }
            let grads = tape.backward(loss).map_err(|e| diverged(e.to_string()))?;
            let mut grads = bound.gradients(&tape, &grads);
            crate::optim::clip_grad_norm(&mut grads, cfg.clip);
            let lr = cosine_lr(cfg.lr, step, total);
            opt.step(&mut params, &grads, |_| Some(lr));
            if params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(diverged("non-finite parameters".into()));
            }
            sum += value;
            step += 1;
        }
        let log = PretrainLog { epoch, loss: sum / batches as f64 };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((params, logs))
}
