//! Reverse-mode vs central finite-difference comparison.

use crate::error::{AutodiffError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|a − n| / max(|a|, |n|)`, or 0 when both are below `abs_floor`.
    pub relative_error: Vec<f64>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Options for [`grad_check`]; `abs_floor` treats coordinates where both
/// gradients are smaller than it as agreeing.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    pub abs_floor: f64,
}

impl GradCheckOptions {
    pub fn new(epsilon: f64, tolerance: f64) -> Self {
        Self {
            epsilon,
            tolerance,
            abs_floor: 1e-9,
        }
    }
}

fn eval<F>(f: &F, point: &Tensor<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let out = tape.value(y);
    out.item().ok_or_else(|| AutodiffError::NonScalar {
        shape: out.shape().to_vec(),
    })
}

/// Checks the reverse-mode gradient of a scalar function of one tensor.
///
/// `f` receives a fresh tape and the input node and must return a
/// single-element output node.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, options: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(options.epsilon > 0.0) {
        return Err(AutodiffError::InvalidArgument {
            op: "grad_check",
            detail: format!("epsilon must be positive, got {}", options.epsilon),
        });
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    let out_shape = tape.shape(y).to_vec();
    if tape.value(y).len() != 1 {
        return Err(AutodiffError::NonScalar { shape: out_shape });
    }
    let grads = tape.backward(y, &Tensor::full(&out_shape, 1.0))?;
    let analytic: Vec<f64> = match grads.get(x) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; point.len()],
    };

    let eps = options.epsilon;
    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * eps));
    }

    let relative_error: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| {
            let scale = a.abs().max(n.abs());
            if scale < options.abs_floor {
                0.0
            } else {
                (a - n).abs() / scale
            }
        })
        .collect();
    let max_relative_error = relative_error.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_relative_error <= options.tolerance,
        analytic,
        numeric,
        relative_error,
        max_relative_error,
        tolerance: options.tolerance,
    })
}
