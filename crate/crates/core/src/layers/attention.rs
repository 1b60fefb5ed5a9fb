use rand_chacha::ChaCha8Rng;

use super::xavier_uniform;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Mask, ParamId, Params, Scalar, Var};

/// Query/key/value projections of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub d_k: usize,
}

/// Heads plus the output projection applied to their concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: Vec<AttentionHead>,
    pub w_o: ParamId,
}

impl MultiHeadAttention {
    pub fn register<T: Scalar>(
        params: &mut Params<T>,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        let d_k = d_model / heads;
        let mut out = Vec::with_capacity(heads);
        for h in 0..heads {
            out.push(AttentionHead {
                w_q: params.add(format!("{prefix}.head{h}.w_q"), xavier_uniform(rng, d_model, d_k))?,
                w_k: params.add(format!("{prefix}.head{h}.w_k"), xavier_uniform(rng, d_model, d_k))?,
                w_v: params.add(format!("{prefix}.head{h}.w_v"), xavier_uniform(rng, d_model, d_k))?,
                d_k,
            });
        }
        let w_o = params.add(format!("{prefix}.w_o"), xavier_uniform(rng, d_model, d_model))?;
        Ok(Self { heads: out, w_o })
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }
}

/// `softmax(q·kᵀ/√d_k + bias)·v` with masked logits excluded from the softmax.
///
/// Returns the attended output `[n_q, d_v]` and the weights `[n_q, n_k]`.
pub fn scaled_dot_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<Var>,
    mask: Option<&Mask>,
) -> Result<(Var, Var)> {
    let (_, d_q) = g.value(q).dims2()?;
    let (n_k, d_k) = g.value(k).dims2()?;
    let (n_v, _) = g.value(v).dims2()?;
    if d_q != d_k {
        return Err(Error::shape("attention q/k", g.shape(q), g.shape(k)));
    }
    if n_v != n_k {
        return Err(Error::shape("attention k/v", g.shape(k), g.shape(v)));
    }
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (d_k as f64).sqrt())?;
    if let Some(b) = bias {
        logits = g.add(logits, b)?;
    }
    let weights = g.softmax_rows(logits, mask)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Projects per head, attends with that head's optional bias, concatenates
/// head outputs and applies the output projection.
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<'_, T>,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    mha: &MultiHeadAttention,
    per_head_bias: Option<&[Var]>,
    mask: Option<&Mask>,
) -> Result<Var> {
    if let Some(b) = per_head_bias {
        if b.len() != mha.heads.len() {
            return Err(Error::invalid(format!(
                "{} bias matrices supplied for {} heads",
                b.len(),
                mha.heads.len()
            )));
        }
    }
    let mut outs = Vec::with_capacity(mha.heads.len());
    for (h, head) in mha.heads.iter().enumerate() {
        let w_q = g.param(head.w_q)?;
        let w_k = g.param(head.w_k)?;
        let w_v = g.param(head.w_v)?;
        let q = g.matmul(q_in, w_q)?;
        let k = g.matmul(k_in, w_k)?;
        let v = g.matmul(v_in, w_v)?;
        let bias = per_head_bias.map(|b| b[h]);
        let (o, _) = scaled_dot_attention(g, q, k, v, bias, mask)?;
        outs.push(o);
    }
    let concat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let w_o = g.param(mha.w_o)?;
    g.matmul(concat, w_o)
}
