//! Transformer building blocks: positional encoding, residual layer
//! normalization, attention, the position-wise feed-forward network and
//! inverted dropout.
//!
//! Every block works on a [`Graph`] so it can be differentiated; weights are
//! referenced by [`ParamId`] and bound through the graph's parameter store.

mod attention;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, Params, Scalar, Tensor, Var};

pub use attention::{multi_head_attention, scaled_dot_attention, AttentionHead, MultiHeadAttention};

/// Default layer-norm epsilon (added to the variance under the square root).
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform Glorot initialization for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform<T: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(&[fan_in, fan_out], data).expect("shape matches buffer")
}

/// Precomputed sinusoidal position table, `[max_len, d_model]`.
#[derive(Clone, Debug)]
pub struct PositionalEncodingTable<T = f32> {
    table: Tensor<T>,
    max_len: usize,
    d_model: usize,
}

impl<T: Scalar> PositionalEncodingTable<T> {
    pub fn table(&self) -> &Tensor<T> {
        &self.table
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    /// The first `n` rows.
    pub fn rows(&self, n: usize) -> Result<Tensor<T>> {
        if n == 0 || n > self.max_len {
            return Err(Error::TooLong {
                len: n,
                max: self.max_len,
            });
        }
        Tensor::new(&[n, self.d_model], self.table.data()[..n * self.d_model].to_vec())
    }
}

/// `PE(pos, 2i) = sin(pos / 10000^(2i/d))`, `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding<T: Scalar>(max_len: usize, d_model: usize) -> Result<PositionalEncodingTable<T>> {
    if d_model == 0 || d_model % 2 != 0 {
        return Err(Error::invalid(format!("d_model must be even and positive, got {d_model}")));
    }
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    let mut data = Vec::with_capacity(max_len * d_model);
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            data.push(T::from_f64(angle.sin()));
            data.push(T::from_f64(angle.cos()));
        }
    }
    Ok(PositionalEncodingTable {
        table: Tensor::new(&[max_len, d_model], data)?,
        max_len,
        d_model,
    })
}

/// Affine parameters of one layer normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    /// Registers unit gain and zero shift of width `d_model`.
    pub fn register<T: Scalar>(params: &mut Params<T>, prefix: &str, d_model: usize) -> Result<Self> {
        Ok(Self {
            gain: params.add(format!("{prefix}.gain"), Tensor::full(&[d_model], T::one()))?,
            shift: params.add(format!("{prefix}.shift"), Tensor::zeros(&[d_model]))?,
            eps: LAYER_NORM_EPS,
        })
    }
}

/// Post-norm residual: `layernorm(h + sub)`.
pub fn residual_layernorm<T: Scalar>(g: &mut Graph<'_, T>, h: Var, sub: Var, ln: &LayerNormParams) -> Result<Var> {
    if ln.eps <= 0.0 {
        return Err(Error::invalid("layer norm epsilon must be positive"));
    }
    let sum = g.add(h, sub)?;
    let gain = g.param(ln.gain)?;
    let shift = g.param(ln.shift)?;
    g.layer_norm(sum, gain, shift, ln.eps)
}

/// Position-wise feed-forward weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl FeedForward {
    pub fn register<T: Scalar>(
        params: &mut Params<T>,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_ff == 0 {
            return Err(Error::invalid("d_ff must be positive"));
        }
        Ok(Self {
            w1: params.add(format!("{prefix}.w1"), xavier_uniform(rng, d_model, d_ff))?,
            b1: params.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff]))?,
            w2: params.add(format!("{prefix}.w2"), xavier_uniform(rng, d_ff, d_model))?,
            b2: params.add(format!("{prefix}.b2"), Tensor::zeros(&[d_model]))?,
        })
    }
}

/// `max(0, x·w1 + b1)·w2 + b2`, row by row.
pub fn feed_forward<T: Scalar>(g: &mut Graph<'_, T>, x: Var, ffn: &FeedForward) -> Result<Var> {
    let w1 = g.param(ffn.w1)?;
    let b1 = g.param(ffn.b1)?;
    let w2 = g.param(ffn.w2)?;
    let b2 = g.param(ffn.b2)?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h)?;
    let out = g.matmul(h, w2)?;
    g.add_row(out, b2)
}

/// Inverted dropout: in training mode each element is zeroed with
/// probability `rate` and survivors are scaled by `1 / (1 - rate)`.
/// Evaluation mode (or `rate == 0`) returns `x` unchanged.
pub fn dropout<T: Scalar>(g: &mut Graph<'_, T>, x: Var, rate: f64, seed: u64, training: bool) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask = (0..n)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect();
    g.mul_const(x, &Tensor::new(&shape, mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_params;

    #[test]
    fn positional_encoding_values() {
        let pe = positional_encoding::<f64>(4, 8).unwrap();
        let t = pe.table();
        for j in 0..8 {
            assert_eq!(t.row(0)[j], if j % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!((t.row(1)[0] - 0.841_471).abs() < 1e-6);

        let wide = positional_encoding::<f64>(2, 512).unwrap();
        let last_sin = wide.table().row(1)[510];
        let expected = (1.0f64 / 10000f64.powf(510.0 / 512.0)).sin();
        assert_eq!(last_sin, expected);
        assert!((last_sin / 1e-4 - 1.0).abs() < 0.05);
    }

    #[test]
    fn positional_encoding_rejects_odd_width() {
        assert!(positional_encoding::<f32>(10, 7).is_err());
        assert!(positional_encoding::<f32>(0, 8).is_err());
    }

    #[test]
    fn layernorm_closed_form_and_constant_row() {
        let mut params = Params::<f64>::new();
        let ln = LayerNormParams::register(&mut params, "ln", 2).unwrap();
        let mut g = Graph::with_params(&params);
        let h = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![4.0, 4.0]])).unwrap();
        let sub = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 1.0]])).unwrap();
        let y = residual_layernorm(&mut g, h, sub, &ln).unwrap();
        let y = g.value(y);
        // Row 0 is [1, 3]: mean 2, population std 1.
        let scale = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((y.row(0)[0] + scale).abs() < 1e-15);
        assert!((y.row(0)[1] - scale).abs() < 1e-15);
        assert_eq!(y.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn feed_forward_hand_cases() {
        let mut params = Params::<f64>::new();
        let ffn = FeedForward {
            w1: params.add("w1", Tensor::scalar(1.0).reshape(&[1, 1]).unwrap()).unwrap(),
            b1: params.add("b1", Tensor::scalar(-3.0)).unwrap(),
            w2: params.add("w2", Tensor::scalar(5.0).reshape(&[1, 1]).unwrap()).unwrap(),
            b2: params.add("b2", Tensor::scalar(0.0)).unwrap(),
        };
        let mut g = Graph::with_params(&params);
        let x = g.constant(Tensor::scalar(2.0).reshape(&[1, 1]).unwrap()).unwrap();
        let y = feed_forward(&mut g, x, &ffn).unwrap();
        assert_eq!(g.value(y).data(), &[0.0]);

        params.set(ffn.b1, Tensor::scalar(1.0)).unwrap();
        params.set(ffn.b2, Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::with_params(&params);
        let x = g.constant(Tensor::scalar(2.0).reshape(&[1, 1]).unwrap()).unwrap();
        let y = feed_forward(&mut g, x, &ffn).unwrap();
        assert_eq!(g.value(y).data(), &[16.0]);
    }

    #[test]
    fn feed_forward_zero_weights_gives_bias() {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ffn = FeedForward::register(&mut params, "ffn", 3, 5, &mut rng).unwrap();
        params.set(ffn.w1, Tensor::zeros(&[3, 5])).unwrap();
        params.set(ffn.w2, Tensor::zeros(&[5, 3])).unwrap();
        params.set(ffn.b2, Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let mut g = Graph::with_params(&params);
        let x = g.constant(Tensor::full(&[2, 3], 7.0)).unwrap();
        let y = feed_forward(&mut g, x, &ffn).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn feed_forward_and_layernorm_gradients() {
        let mut params = Params::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ffn = FeedForward::register(&mut params, "ffn", 4, 6, &mut rng).unwrap();
        let ln = LayerNormParams::register(&mut params, "ln", 4).unwrap();
        params.set(ln.gain, xavier_uniform::<f64>(&mut rng, 1, 4).reshape(&[4]).unwrap()).unwrap();
        params.set(ffn.b1, Tensor::from_f64(&[6], &[0.1, -0.2, 0.3, 0.05, -0.1, 0.2]).unwrap()).unwrap();
        let x = xavier_uniform::<f64>(&mut rng, 3, 4);
        let w = xavier_uniform::<f64>(&mut rng, 3, 4);
        let ids: Vec<_> = params.ids().collect();
        let err = finite_diff_check_params(
            &params,
            &ids,
            |g| {
                let xv = g.constant(x.clone())?;
                let sub = feed_forward(g, xv, &ffn)?;
                let y = residual_layernorm(g, xv, sub, &ln)?;
                let wv = g.constant(w.clone())?;
                let y = g.mul(y, wv)?;
                g.sum(y)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn dropout_modes() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[10], 1.0)).unwrap();
        assert_eq!(dropout(&mut g, x, 0.0, 1, true).unwrap(), x);
        assert_eq!(dropout(&mut g, x, 0.5, 1, false).unwrap(), x);
        assert!(dropout(&mut g, x, 1.0, 1, true).is_err());
        let a = dropout(&mut g, x, 0.3, 9, true).unwrap();
        let b = dropout(&mut g, x, 0.3, 9, true).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn dropout_statistics() {
        let n = 20_000;
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[n], 1.0)).unwrap();
        let y = dropout(&mut g, x, 0.1, 42, true).unwrap();
        let vals = g.value(y).data();
        let survivors = vals.iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = vals.iter().sum::<f64>() / n as f64;
        assert!((survivors - 0.9).abs() <= 0.02, "{survivors}");
        assert!((mean - 1.0).abs() <= 0.03, "{mean}");
    }
}
