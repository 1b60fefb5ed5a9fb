//! Shared inputs for the criterion benches.

use ktransformer::{ClusterMode, KTransformer, ModelConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(&[rows, cols], data).expect("consistent shape")
}

pub fn random_ids(len: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(4..vocab)).collect()
}

/// Model of the size used for the copy task.
pub fn small_model(mode: ClusterMode) -> KTransformer<f32> {
    KTransformer::new(ModelConfig {
        d_model: 32,
        heads: 2,
        d_ff: 64,
        layers_enc: 2,
        layers_dec: 2,
        dropout: 0.0,
        cluster_mode: mode,
        src_vocab: 64,
        tgt_vocab: 64,
        ..ModelConfig::default()
    })
    .expect("valid config")
}
