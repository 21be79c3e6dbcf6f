//! Central finite-difference gradient checking.

use super::{AutodiffError, Tape, Tensor, Var};

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Worst relative error over all inputs (see [`relative_error`]).
    pub max_rel_err: f64,
    /// Input whose gradient produced `max_rel_err`.
    pub worst_input: usize,
}

/// `max_i |a_i - n_i| / max(max_i max(|a_i|, |n_i|), 1e-8)`.
///
/// Scaling by the largest gradient magnitude keeps near-zero entries from
/// dominating through finite-difference noise.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.check()?;
    Ok(tape.value(out).data()[0])
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with the given `step`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheck { max_rel_err: 0.0, worst_input: 0 };
    let mut probe = inputs.to_vec();
    for (i, (v, input)) in vars.iter().zip(inputs).enumerate() {
        let analytic = grads.wrt(*v, input);
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let x0 = input.data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let up = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0 - step;
            let down = evaluate(&f, &probe)?;
            probe[i].data_mut()[j] = x0;
            *slot = (up - down) / (2.0 * step);
        }
        let err = relative_error(analytic.data(), &numeric);
        if err > report.max_rel_err {
            report = GradCheck { max_rel_err: err, worst_input: i };
        }
    }
    Ok(report)
}
