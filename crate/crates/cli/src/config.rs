//! Run configuration: a TOML file with `[data]`, `[model]` and `[train]`
//! tables. Every key is optional; unknown keys are rejected.

use std::path::{Path, PathBuf};

use ktransformer::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{read_file, CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Output directory of `ktransformer preprocess`.
    pub corpus_dir: PathBuf,
    /// Raw validation files; without them the first training pairs are used.
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    pub val_max_pairs: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus_dir: PathBuf::from("data/prep"),
            valid_src: None,
            valid_tgt: None,
            val_max_pairs: 100,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    /// `src_vocab` and `tgt_vocab` are taken from the vocabulary files.
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::parse(&read_file(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}
