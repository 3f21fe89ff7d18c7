//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes on a fresh tape, so it
//! is independent of every backward rule it is used to check.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Components whose analytic and numeric gradients are both smaller than this
/// are compared on an absolute scale (relative error is meaningless near 0).
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst component.
    pub worst: (usize, usize),
    pub checked: usize,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

fn eval<F>(inputs: &[Tensor<f64>], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Compares the tape's gradient of the scalar `f(inputs)` against central
/// differences with the given `step`, for every element of every input in
/// `check` (all inputs when `check` is `None`).
pub fn check_gradients<F>(inputs: &[Tensor<f64>], check: Option<&[usize]>, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let mut grads = tape.backward(out)?;

    let all: Vec<usize> = (0..inputs.len()).collect();
    let targets = check.unwrap_or(&all);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for &i in targets {
        let analytic = grads.take(vars[i]).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        if analytic.len() != inputs[i].numel() {
            return Err(TensorError::Contract(format!(
                "gradient length mismatch for input {}",
                i
            )));
        }
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let plus = eval(&probe, &f)?;
            probe[i].data_mut()[j] = x0 - step;
            let minus = eval(&probe, &f)?;
            probe[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(analytic[j], numeric);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces a tensor-valued op to a scalar through a fixed random weighting so
/// that every output element contributes a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum_all(prod)
}
