//! Minimal deterministic reverse-mode automatic differentiation over dense
//! `f64` tensors.

mod gradcheck;
pub(crate) mod linalg;
mod tape;
mod tensor;
pub mod warp;

pub use gradcheck::{check_gradients, relative_error, GradCheck};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("softmax row {row} has no allowed entries")]
    EmptyRow { row: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Gumbel-Softmax over the last axis.
///
/// With `hard`, the forward value is the exact one-hot argmax of the relaxed
/// sample and the gradient is that of the relaxed sample (straight-through).
/// Returns `(output, relaxed sample)`.
pub fn gumbel_softmax(
    tape: &mut Tape,
    logits: Var,
    temperature: f64,
    rng: &mut Rng,
    hard: bool,
) -> Result<(Var, Var), AutodiffError> {
    if !(temperature > 0.0) {
        return Err(AutodiffError::InvalidArgument(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    let shape = tape.shape(logits).to_vec();
    let n: usize = shape.iter().product();
    let noise: Vec<f64> = (0..n).map(|_| rng.gumbel()).collect();
    let noise = tape.constant(Tensor::new(&shape, noise)?);
    let perturbed = tape.add(logits, noise)?;
    let scaled = tape.scale(perturbed, 1.0 / temperature);
    let soft = tape.softmax(scaled)?;
    if !hard {
        return Ok((soft, soft));
    }
    let y = tape.value(soft);
    let d = y.last_dim();
    let mut onehot = vec![0.0; n];
    for r in 0..y.rows() {
        onehot[r * d + argmax(y.row(r))] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(&shape, onehot)?);
    Ok((tape.straight_through(onehot, soft)?, soft))
}
