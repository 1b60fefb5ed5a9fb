pub mod cluster;
pub mod corpus;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use cluster::{kmeans_fit, ClusterResult};
pub use corpus::{Batch, EncodedPair, ParallelCorpus, Profile, TokenSequence, Vocabulary};
pub use error::{Error, Result};
pub use metrics::{bleu, corpus_bleu, BleuConfig, BleuReport};
pub use model::{ClusterMode, KTransformer, ModelConfig, Pass};
pub use tensor::{Graph, Mask, ParamId, Params, Reduction, Scalar, Tensor, Var};
pub use trainer::{train, AdamState, TrainConfig};
