//! Central finite-difference validation of tape gradients.

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|)` over checked coordinates.
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

fn scalar_output(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(TensorError::Invalid(format!(
            "gradient check needs a scalar output, got shape {:?}",
            v.shape()
        )));
    }
    let y = v.data()[0];
    if !y.is_finite() {
        return Err(TensorError::Invalid("function value is not finite".into()));
    }
    Ok(y)
}

/// Compare the tape gradient of scalar `output` with respect to `leaf`
/// against central differences, perturbing the listed flat coordinates
/// (all of them when `coords` is `None`). The leaf is restored afterwards.
pub fn check_leaf(
    tape: &mut Tape,
    output: Var,
    leaf: Var,
    coords: Option<&[usize]>,
    step: f64,
) -> Result<GradCheckReport> {
    scalar_output(tape, output)?;
    let grads = tape.backward(output)?;
    let analytic_full = grads.wrt(tape, leaf);
    let base = tape.value(leaf).clone();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..base.len()).collect();
            &all
        }
    };
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    let mut worst = 0;
    let mut max_rel_error: f64 = 0.0;
    let probe = |tape: &mut Tape, idx: usize, delta: f64| -> Result<f64> {
        let mut x = base.clone();
        x.data_mut()[idx] += delta;
        tape.set_value(leaf, x)?;
        tape.eval()?;
        scalar_output(tape, output)
    };
    for &idx in coords {
        let plus = probe(tape, idx, step)?;
        let minus = probe(tape, idx, -step)?;
        let num = (plus - minus) / (2.0 * step);
        let ana = analytic_full.data()[idx];
        let rel = (ana - num).abs() / ana.abs().max(1.0);
        if rel > max_rel_error {
            max_rel_error = rel;
            worst = idx;
        }
        analytic.push(ana);
        numeric.push(num);
    }
    tape.set_value(leaf, base)?;
    tape.eval()?;
    Ok(GradCheckReport { max_rel_error, worst, analytic, numeric })
}

/// Builds `f` on a fresh tape at `point` and returns the maximum relative
/// error between its gradient and central differences with the given step.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    Ok(check_leaf(&mut tape, y, x, None, step)?.max_rel_error)
}
