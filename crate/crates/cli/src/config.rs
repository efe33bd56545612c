//! Run configuration: defaults, then the config file, then flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vqlogits::model::ModelConfig;
use vqlogits::quantize::MappingStrategy;
use vqlogits::train::TrainConfig;

use crate::CliError;

/// Environment variable naming the directory that holds the default corpus.
pub const DATA_DIR_ENV: &str = "VQLOGITS_DATA_DIR";
pub const DEFAULT_CORPUS_FILE: &str = "moby_dick.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum HeadChoice {
    #[default]
    Full,
    Vq,
    Lowrank,
    Adaptive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum InitChoice {
    /// Cluster a trained full model's output embeddings.
    #[default]
    #[value(name = "option_a")]
    OptionA,
    /// Train the quantized head from scratch.
    #[value(name = "option_b")]
    OptionB,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: Option<PathBuf>,
    pub max_vocab: usize,
    pub min_freq: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            max_vocab: 10_000,
            min_freq: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub kind: HeadChoice,
    pub k: usize,
    pub rank: usize,
    pub init: InitChoice,
    pub mapping: MappingStrategy,
    pub codebook_trainable: bool,
    pub kmeans_iters: usize,
    pub kmeans_restarts: usize,
    pub from_checkpoint: Option<PathBuf>,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kind: HeadChoice::Full,
            k: 1024,
            rank: 64,
            init: InitChoice::OptionA,
            mapping: MappingStrategy::KmeansOutput,
            codebook_trainable: true,
            kmeans_iters: vqlogits::quantize::DEFAULT_KMEANS_ITERS,
            kmeans_restarts: 1,
            from_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub data: DataConfig,
    pub head: HeadConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| vqlogits::Error::Config(format!("config file: {e}")).into())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// The corpus path from the config, else `$VQLOGITS_DATA_DIR/moby_dick.txt`.
    pub fn corpus_path(&self) -> Result<PathBuf, CliError> {
        resolve_corpus(self.data.corpus.as_deref())
    }
}

pub fn resolve_corpus(explicit: Option<&Path>) -> Result<PathBuf, CliError> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) => Ok(PathBuf::from(dir).join(DEFAULT_CORPUS_FILE)),
        None => Err(CliError::Usage(format!(
            "no corpus given: pass --corpus or set {DATA_DIR_ENV}"
        ))),
    }
}
