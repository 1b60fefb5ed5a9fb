use crate::error::{Error, Result};
use crate::tensor::{ParamId, Params, Scalar, Tensor};

pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_EPS: f64 = 1e-8;

/// Adam moment buffers, one pair per parameter, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Completed steps.
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &Params<T>, lr: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            lr,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_EPS,
        }
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.t == other.t
            && self.lr.to_bits() == other.lr.to_bits()
            && self.beta1.to_bits() == other.beta1.to_bits()
            && self.beta2.to_bits() == other.beta2.to_bits()
            && self.eps.to_bits() == other.eps.to_bits()
            && self.m.len() == other.m.len()
            && self.m.iter().zip(&other.m).all(|(a, b)| a.bit_eq(b))
            && self.v.iter().zip(&other.v).all(|(a, b)| a.bit_eq(b))
    }
}

/// One bias-corrected Adam update at `state.lr`. Parameters without a
/// gradient are left alone. Rejects the whole step, changing nothing, if any
/// gradient is non-finite or misshapen.
pub fn adam_step<T: Scalar>(params: &mut Params<T>, grads: &[(ParamId, Tensor<T>)], state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "optimizer tracks {} parameters, model has {}",
            state.m.len(),
            params.len()
        )));
    }
    for (id, g) in grads {
        let p = params.get(*id);
        if g.shape() != p.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (id, g) in grads {
        let i = id.index();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = params.get_mut(*id).data_mut();
        for (((p, mi), vi), gi) in theta.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
            let gi = gi.as_f64();
            let mn = b1 * mi.as_f64() + (1.0 - b1) * gi;
            let vn = b2 * vi.as_f64() + (1.0 - b2) * gi * gi;
            *mi = T::from_f64(mn);
            *vi = T::from_f64(vn);
            let update = state.lr * (mn / c1) / ((vn / c2).sqrt() + state.eps);
            *p = T::from_f64(p.as_f64() - update);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = T::from_f64(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
    norm
}
