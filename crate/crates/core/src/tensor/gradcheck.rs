//! Central finite-difference gradient checks (64-bit only).

use super::{Graph, ParamId, Params, Tensor, Var};
use crate::error::{Error, Result};

/// Below this magnitude gradients are compared absolutely, so an exactly
/// zero derivative is not failed on rounding noise in the difference quotient.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(|analytic| + |numeric|, GRADIENT_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(GRADIENT_FLOOR)
}

fn scalar_of(g: &Graph<'_, f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Compares the tape gradient of a scalar function `f` at `x` with central
/// differences of the given step; returns the largest relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone())?;
    let out = f(&mut g, xv)?;
    g.backward(out)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let xv = g.leaf(probe)?;
        let out = f(&mut g, xv)?;
        scalar_of(&g, out)
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Like [`finite_diff_check`] but differentiates with respect to stored
/// parameters; `f` builds the loss through [`Graph::param`].
pub fn finite_diff_check_params<F>(params: &Params<f64>, ids: &[ParamId], f: F, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::with_params(params);
    let out = f(&mut g)?;
    g.backward(out)?;
    let grads = g.param_grads();

    let mut worst = 0.0f64;
    for &id in ids {
        let zeros = Tensor::zeros(params.get(id).shape());
        let analytic = grads
            .iter()
            .find(|(pid, _)| *pid == id)
            .map_or(&zeros, |(_, t)| t);
        for i in 0..params.get(id).len() {
            let mut probe = params.clone();
            probe.get_mut(id).data_mut()[i] += step;
            let plus = {
                let mut g = Graph::with_params(&probe);
                let out = f(&mut g)?;
                scalar_of(&g, out)?
            };
            probe.get_mut(id).data_mut()[i] -= 2.0 * step;
            let minus = {
                let mut g = Graph::with_params(&probe);
                let out = f(&mut g)?;
                scalar_of(&g, out)?
            };
            let numeric = (plus - minus) / (2.0 * step);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    Ok(worst)
}
