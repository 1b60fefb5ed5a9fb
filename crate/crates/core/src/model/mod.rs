//! The K-Transformer: a post-norm Transformer encoder-decoder whose encoder
//! self-attention heads receive an additive bias derived from a per-sentence
//! K-Means clustering of the source token embeddings.
//!
//! With [`ClusterMode::Off`], or with every cluster gain at its zero
//! initialization, the model computes exactly what a vanilla Transformer
//! with the same weights computes.

mod bias;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterResult, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::layers::{
    dropout, feed_forward, multi_head_attention, positional_encoding, residual_layernorm, xavier_uniform, FeedForward,
    LayerNormParams, MultiHeadAttention, PositionalEncodingTable,
};
use crate::tensor::{Graph, Mask, ParamId, Params, Reduction, Scalar, Tensor, Var};

pub use bias::{
    affinity_matrix, cluster_bias, cluster_source, same_cluster_matrix, ClusterBiasParams, ClusterFeatures, ClusterMode,
};

/// Every architectural hyperparameter of a [`KTransformer`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub dropout: f64,
    /// Longest source or target sentence, in tokens.
    pub max_len: usize,
    /// Requested cluster count; each sentence uses `min(clusters_k, length)`.
    pub clusters_k: usize,
    pub cluster_mode: ClusterMode,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Seeds weight initialization and the K-Means centre draw.
    pub seed: u64,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            layers_enc: 2,
            layers_dec: 2,
            dropout: 0.1,
            max_len: 50,
            clusters_k: 4,
            cluster_mode: ClusterMode::Both,
            src_vocab: 4,
            tgt_vocab: 4,
            seed: 0,
            kmeans_max_iter: DEFAULT_MAX_ITER,
            kmeans_tol: DEFAULT_TOL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} must be divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_model % 2 != 0 {
            return fail(format!("d_model {} must be even", self.d_model));
        }
        if self.d_ff == 0 || self.max_len == 0 || self.clusters_k == 0 {
            return fail("d_ff, max_len and clusters_k must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return fail("vocabularies must include the four reserved tokens".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    self_attn: MultiHeadAttention,
    ln_attn: LayerNormParams,
    ffn: FeedForward,
    ln_ffn: LayerNormParams,
    cluster: ClusterBiasParams,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    ln_self: LayerNormParams,
    cross_attn: MultiHeadAttention,
    ln_cross: LayerNormParams,
    ffn: FeedForward,
    ln_ffn: LayerNormParams,
}

/// Forward-pass mode plus the dropout seed stream.
#[derive(Clone, Debug)]
pub struct Pass {
    training: bool,
    seed: u64,
    counter: u64,
}

impl Pass {
    pub fn eval() -> Self {
        Self {
            training: false,
            seed: 0,
            counter: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            training: true,
            seed,
            counter: 0,
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    fn next_seed(&mut self) -> u64 {
        self.counter += 1;
        mix_seed(self.seed, self.counter)
    }
}

/// SplitMix64 finalizer over two words; used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Encoder output for one source sentence.
#[derive(Clone, Debug)]
pub struct Encoded<T = f32> {
    pub memory: Var,
    /// `false` at padding positions.
    pub src_valid: Vec<bool>,
    /// Present unless clustering is off.
    pub clusters: Option<ClusterResult>,
    pub features: Option<ClusterFeatures<T>>,
}

/// Transformer encoder-decoder with cluster-conditioned encoder attention.
#[derive(Clone, Debug)]
pub struct KTransformer<T: Scalar = f32> {
    config: ModelConfig,
    params: Params<T>,
    src_embed: ParamId,
    tgt_embed: ParamId,
    positions: PositionalEncodingTable<T>,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    out_w: ParamId,
    out_b: ParamId,
}

fn embedding_table<T: Scalar>(rng: &mut ChaCha8Rng, vocab: usize, d_model: usize) -> Tensor<T> {
    // Unit variance after the sqrt(d_model) scale applied in the forward pass.
    let limit = (3.0 / d_model as f64).sqrt();
    let data = (0..vocab * d_model)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(&[vocab, d_model], data).expect("positive dims")
}

impl<T: Scalar> KTransformer<T> {
    /// Builds a freshly initialized model.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::new();
        let d = config.d_model;
        let src_embed = params.add("src_embed", embedding_table(&mut rng, config.src_vocab, d))?;
        let tgt_embed = params.add("tgt_embed", embedding_table(&mut rng, config.tgt_vocab, d))?;
        let mut encoder = Vec::with_capacity(config.layers_enc);
        for l in 0..config.layers_enc {
            let p = format!("enc{l}");
            encoder.push(EncoderLayer {
                self_attn: MultiHeadAttention::register(&mut params, &format!("{p}.self_attn"), d, config.heads, &mut rng)?,
                ln_attn: LayerNormParams::register(&mut params, &format!("{p}.ln_attn"), d)?,
                ffn: FeedForward::register(&mut params, &format!("{p}.ffn"), d, config.d_ff, &mut rng)?,
                ln_ffn: LayerNormParams::register(&mut params, &format!("{p}.ln_ffn"), d)?,
                cluster: ClusterBiasParams::register(&mut params, &format!("{p}.cluster"), config.heads)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.layers_dec);
        for l in 0..config.layers_dec {
            let p = format!("dec{l}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::register(&mut params, &format!("{p}.self_attn"), d, config.heads, &mut rng)?,
                ln_self: LayerNormParams::register(&mut params, &format!("{p}.ln_self"), d)?,
                cross_attn: MultiHeadAttention::register(&mut params, &format!("{p}.cross_attn"), d, config.heads, &mut rng)?,
                ln_cross: LayerNormParams::register(&mut params, &format!("{p}.ln_cross"), d)?,
                ffn: FeedForward::register(&mut params, &format!("{p}.ffn"), d, config.d_ff, &mut rng)?,
                ln_ffn: LayerNormParams::register(&mut params, &format!("{p}.ln_ffn"), d)?,
            });
        }
        let out_w = params.add("out.w", xavier_uniform(&mut rng, d, config.tgt_vocab))?;
        let out_b = params.add("out.b", Tensor::zeros(&[config.tgt_vocab]))?;
        // One extra row: decoder inputs carry a leading <BOS>.
        let positions = positional_encoding(config.max_len + 1, d)?;
        Ok(Self {
            config,
            params,
            src_embed,
            tgt_embed,
            positions,
            encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    /// Rebuilds a model around stored parameter values, checking that every
    /// name and shape matches the layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: Params<T>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, name, value) in params.iter() {
            if model.params.name(id) != name {
                return Err(Error::invalid(format!(
                    "parameter {} is {name}, expected {}",
                    id.index(),
                    model.params.name(id)
                )));
            }
            model.params.set(id, value.clone())?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn set_cluster_mode(&mut self, mode: ClusterMode) {
        self.config.cluster_mode = mode;
    }

    pub fn src_embedding(&self) -> ParamId {
        self.src_embed
    }

    pub fn tgt_embedding(&self) -> ParamId {
        self.tgt_embed
    }

    /// Gain parameters of each encoder layer.
    pub fn cluster_params(&self) -> Vec<ClusterBiasParams> {
        self.encoder.iter().map(|l| l.cluster.clone()).collect()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Result<KTransformer<U>> {
        KTransformer::from_params(self.config.clone(), self.params.cast())
    }

    fn check_ids(&self, ids: &[usize], vocab: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::invalid("empty sequence"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, size: vocab });
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph<'_, T>, table: ParamId, ids: &[usize]) -> Result<Var> {
        let table = g.param(table)?;
        let x = g.gather(table, ids)?;
        g.scale(x, (self.config.d_model as f64).sqrt())
    }

    fn add_positions(&self, g: &mut Graph<'_, T>, x: Var, n: usize, pass: &mut Pass) -> Result<Var> {
        let pe = g.constant(self.positions.rows(n)?)?;
        let x = g.add(x, pe)?;
        dropout(g, x, self.config.dropout, pass.next_seed(), pass.training)
    }

    fn sublayer_dropout(&self, g: &mut Graph<'_, T>, x: Var, pass: &mut Pass) -> Result<Var> {
        dropout(g, x, self.config.dropout, pass.next_seed(), pass.training)
    }

    /// Clusters the valid positions of `embedded` (position-free embeddings).
    fn compute_clusters(&self, embedded: &Tensor<T>, valid: &[bool]) -> Result<(ClusterResult, ClusterFeatures<T>)> {
        let d = self.config.d_model;
        let rows: Vec<f64> = (0..valid.len())
            .filter(|&i| valid[i])
            .flat_map(|i| embedded.row(i).iter().map(|v| v.as_f64()).collect::<Vec<_>>())
            .collect();
        let points = Tensor::new(&[rows.len() / d, d], rows)?;
        let result = cluster_source(
            &points,
            self.config.clusters_k,
            self.config.seed,
            self.config.kmeans_max_iter,
            self.config.kmeans_tol,
        )?;
        let features = ClusterFeatures::from_clusters(&result, &points, valid, self.config.heads)?;
        Ok((result, features))
    }

    /// Encodes one source sentence. `PAD` ids are masked out of attention and
    /// clustering. `fixed` substitutes precomputed cluster features for the
    /// ones normally derived from the current embeddings.
    pub fn encode(
        &self,
        g: &mut Graph<'_, T>,
        src: &[usize],
        pass: &mut Pass,
        fixed: Option<&ClusterFeatures<T>>,
    ) -> Result<Encoded<T>> {
        self.check_ids(src, self.config.src_vocab)?;
        if src.len() > self.config.max_len {
            return Err(Error::TooLong {
                len: src.len(),
                max: self.config.max_len,
            });
        }
        let n = src.len();
        let src_valid: Vec<bool> = src.iter().map(|&id| id != PAD).collect();
        if !src_valid.iter().any(|&v| v) {
            return Err(Error::invalid("source sentence is all padding"));
        }
        let embedded = self.embed(g, self.src_embed, src)?;

        let mode = self.config.cluster_mode;
        let (clusters, features) = match (mode, fixed) {
            (ClusterMode::Off, _) => (None, None),
            (_, Some(f)) => {
                if f.same.shape() != [n, n] || f.affinity.len() != self.config.heads {
                    return Err(Error::shape("fixed cluster features", f.same.shape(), &[n, n]));
                }
                (None, Some(f.clone()))
            }
            (_, None) => {
                let (r, f) = self.compute_clusters(g.value(embedded), &src_valid)?;
                (Some(r), Some(f))
            }
        };

        let mask = if src_valid.iter().all(|&v| v) {
            None
        } else {
            Some(Mask::key_padding(n, &src_valid))
        };
        let mut x = self.add_positions(g, embedded, n, pass)?;
        for layer in &self.encoder {
            let biases = match &features {
                Some(f) => Some(f.bias_vars(g, &layer.cluster, mode)?),
                None => None,
            };
            let attn = multi_head_attention(g, x, x, x, &layer.self_attn, biases.as_deref(), mask.as_ref())?;
            let attn = self.sublayer_dropout(g, attn, pass)?;
            x = residual_layernorm(g, x, attn, &layer.ln_attn)?;
            let ff = feed_forward(g, x, &layer.ffn)?;
            let ff = self.sublayer_dropout(g, ff, pass)?;
            x = residual_layernorm(g, x, ff, &layer.ln_ffn)?;
        }
        Ok(Encoded {
            memory: x,
            src_valid,
            clusters,
            features,
        })
    }

    /// Vocabulary logits `[m, tgt_vocab]` for a decoder input that starts with
    /// `<BOS>`; row `t` predicts the token after position `t`.
    pub fn decode_forward(&self, g: &mut Graph<'_, T>, tgt_in: &[usize], enc: &Encoded<T>, pass: &mut Pass) -> Result<Var> {
        self.check_ids(tgt_in, self.config.tgt_vocab)?;
        let m = tgt_in.len();
        if m > self.positions.max_len() {
            return Err(Error::TooLong {
                len: m,
                max: self.positions.max_len(),
            });
        }
        let tgt_valid: Vec<bool> = tgt_in.iter().enumerate().map(|(i, &id)| i == 0 || id != PAD).collect();
        let self_mask = Mask::causal(m).and(&Mask::key_padding(m, &tgt_valid))?;
        let cross_mask = if enc.src_valid.iter().all(|&v| v) {
            None
        } else {
            Some(Mask::key_padding(m, &enc.src_valid))
        };
        let embedded = self.embed(g, self.tgt_embed, tgt_in)?;
        let mut y = self.add_positions(g, embedded, m, pass)?;
        for layer in &self.decoder {
            let sa = multi_head_attention(g, y, y, y, &layer.self_attn, None, Some(&self_mask))?;
            let sa = self.sublayer_dropout(g, sa, pass)?;
            y = residual_layernorm(g, y, sa, &layer.ln_self)?;
            let ca = multi_head_attention(g, y, enc.memory, enc.memory, &layer.cross_attn, None, cross_mask.as_ref())?;
            let ca = self.sublayer_dropout(g, ca, pass)?;
            y = residual_layernorm(g, y, ca, &layer.ln_cross)?;
            let ff = feed_forward(g, y, &layer.ffn)?;
            let ff = self.sublayer_dropout(g, ff, pass)?;
            y = residual_layernorm(g, y, ff, &layer.ln_ffn)?;
        }
        let w = g.param(self.out_w)?;
        let b = g.param(self.out_b)?;
        let logits = g.matmul(y, w)?;
        g.add_row(logits, b)
    }

    /// Teacher-forced loss of one pair. `tgt` may carry trailing `PAD`s; the
    /// decoder reads `<BOS> tgt` and is scored against `tgt <EOS>`. Returns
    /// the loss and the number of scored tokens.
    pub fn pair_loss(
        &self,
        g: &mut Graph<'_, T>,
        src: &[usize],
        tgt: &[usize],
        pass: &mut Pass,
        reduction: Reduction,
        fixed: Option<&ClusterFeatures<T>>,
    ) -> Result<(Var, usize)> {
        let (tgt_in, targets) = teacher_forcing(tgt);
        let enc = self.encode(g, src, pass, fixed)?;
        let logits = self.decode_forward(g, &tgt_in, &enc, pass)?;
        let count = targets.iter().filter(|&&t| t != PAD).count();
        Ok((token_loss(g, logits, &targets, reduction)?, count))
    }

    /// Evaluation-mode logits for a source and a decoder input.
    pub fn logits(&self, src: &[usize], tgt_in: &[usize]) -> Result<Tensor<T>> {
        let mut g = Graph::with_params(&self.params);
        let mut pass = Pass::eval();
        let enc = self.encode(&mut g, src, &mut pass, None)?;
        let out = self.decode_forward(&mut g, tgt_in, &enc, &mut pass)?;
        Ok(g.value(out).clone())
    }

    /// Evaluation-mode cluster features of a source sentence, if clustering is on.
    pub fn cluster_features(&self, src: &[usize]) -> Result<Option<ClusterFeatures<T>>> {
        let mut g = Graph::with_params(&self.params);
        let enc = self.encode(&mut g, src, &mut Pass::eval(), None)?;
        Ok(enc.features)
    }

    /// Greedy decoding: from `<BOS>`, append the highest-scoring token until
    /// `<EOS>` or `max_out_len` tokens. `<PAD>` and `<BOS>` are never emitted;
    /// ties go to the lowest id.
    pub fn greedy_translate(&self, src: &[usize], max_out_len: usize) -> Result<Vec<usize>> {
        let max_out_len = max_out_len.min(self.config.max_len);
        let mut g = Graph::with_params(&self.params);
        let mut pass = Pass::eval();
        let enc = self.encode(&mut g, src, &mut pass, None)?;
        let mark = g.len();
        let mut out = Vec::new();
        while out.len() < max_out_len {
            let mut tgt_in = Vec::with_capacity(out.len() + 1);
            tgt_in.push(BOS);
            tgt_in.extend_from_slice(&out);
            let logits = self.decode_forward(&mut g, &tgt_in, &enc, &mut pass)?;
            let last = g.value(logits).row(tgt_in.len() - 1);
            let mut best = EOS;
            let mut best_v = T::neg_infinity();
            for (id, &v) in last.iter().enumerate() {
                if id == PAD || id == BOS {
                    continue;
                }
                if v > best_v {
                    best_v = v;
                    best = id;
                }
            }
            g.truncate(mark);
            if best == EOS {
                break;
            }
            out.push(best);
        }
        Ok(out)
    }
}

/// Splits a (possibly padded) target into decoder input `<BOS> tgt` and
/// scoring targets `tgt <EOS>`, keeping padding at the end.
pub fn teacher_forcing(tgt: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let real = tgt.iter().take_while(|&&t| t != PAD).count();
    let mut tgt_in = Vec::with_capacity(tgt.len() + 1);
    tgt_in.push(BOS);
    tgt_in.extend_from_slice(tgt);
    let mut targets = Vec::with_capacity(tgt.len() + 1);
    targets.extend_from_slice(&tgt[..real]);
    targets.push(EOS);
    targets.resize(tgt.len() + 1, PAD);
    (tgt_in, targets)
}

/// Mean (or summed) token cross-entropy; `PAD` targets are ignored.
pub fn token_loss<T: Scalar>(g: &mut Graph<'_, T>, logits: Var, targets: &[usize], reduction: Reduction) -> Result<Var> {
    let targets: Vec<Option<usize>> = targets.iter().map(|&t| (t != PAD).then_some(t)).collect();
    g.cross_entropy(logits, &targets, reduction)
}

#[cfg(test)]
mod tests;
