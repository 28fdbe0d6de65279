//! Central finite-difference gradient checking.
//!
//! The numeric estimate only ever evaluates forward passes, so it is
//! independent of every backward rule it verifies.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Outcome of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|analytic − numeric| / max(1, |analytic|, |numeric|)` over all checked entries.
    pub max_rel_err: f64,
    /// Number of scalar entries compared.
    pub entries: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Checks `∂f/∂inputs` and `∂f/∂params` of a scalar-valued `f` with step `h`.
///
/// `f` receives a fresh tape, the parameter store and one leaf per input.
pub fn check_gradients<F, Fun>(
    inputs: &[Tensor<F>],
    params: &mut ParamStore<F>,
    h: F,
    f: Fun,
) -> Result<GradCheck>
where
    F: Scalar,
    Fun: Fn(&mut Tape<F>, &ParamStore<F>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<F>], params: &ParamStore<F>| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = f(&mut tape, params, &vars)?;
        Ok(tape.value(out).item().to_f64().unwrap_or(f64::NAN))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, params, &vars)?;
    params.zero_grad();
    tape.backward_into(out, params)?;
    let input_grads: Vec<Tensor<F>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let two_h = 2.0 * h.to_f64().unwrap_or(f64::NAN);
    let mut worst = 0f64;
    let mut entries = 0;

    let mut perturbed = inputs.to_vec();
    for (i, grad) in input_grads.iter().enumerate() {
        for j in 0..perturbed[i].len() {
            let orig = perturbed[i].data()[j];
            perturbed[i].data_mut()[j] = orig + h;
            let plus = eval(&perturbed, params)?;
            perturbed[i].data_mut()[j] = orig - h;
            let minus = eval(&perturbed, params)?;
            perturbed[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / two_h;
            let analytic = grad.data()[j].to_f64().unwrap_or(f64::NAN);
            worst = worst.max(rel_err(analytic, numeric));
            entries += 1;
        }
    }

    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let analytic_grad = params.grad(id).clone();
        for j in 0..analytic_grad.len() {
            let orig = params.value(id).data()[j];
            params.value_mut(id).data_mut()[j] = orig + h;
            let plus = eval(inputs, params)?;
            params.value_mut(id).data_mut()[j] = orig - h;
            let minus = eval(inputs, params)?;
            params.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / two_h;
            let analytic = analytic_grad.data()[j].to_f64().unwrap_or(f64::NAN);
            worst = worst.max(rel_err(analytic, numeric));
            entries += 1;
        }
    }
    if worst.is_nan() {
        worst = f64::INFINITY;
    }
    Ok(GradCheck {
        max_rel_err: worst,
        entries,
    })
}

/// Step and tolerance conventions for each precision.
pub trait CheckPrecision: Scalar {
    const STEP: f64;
    const TOL: f64;
}

impl CheckPrecision for f32 {
    const STEP: f64 = 1e-3;
    const TOL: f64 = 1e-3;
}

impl CheckPrecision for f64 {
    const STEP: f64 = 1e-6;
    const TOL: f64 = 1e-6;
}
