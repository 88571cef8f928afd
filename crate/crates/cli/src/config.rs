//! JSON run configurations. Every struct rejects unknown fields, and parse
//! errors carry the JSON path of the offending value. Relative paths inside
//! a config resolve against the config file's directory.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use mmpfn_core::data::SyntheticTask;
use mmpfn_core::encoders::ColumnSpec;
use mmpfn_core::imbalance::SweepConfig;
use mmpfn_core::model::{ModalityConfig, ModelConfig};
use mmpfn_core::prior::PretrainConfig;
use mmpfn_core::train::FineTuneConfig;

use crate::error::{CliError, CliResult};

/// Where backbone, decoder and encoder weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BackboneSource {
    Checkpoint(PathBuf),
    /// Pretrain in-process before running.
    Pretrain(PretrainConfig),
    /// Keep the deterministic initialization.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        task: SyntheticTask,
        #[serde(default)]
        seed: u64,
    },
    /// A CSV table plus row-aligned embedding files.
    Files {
        table: PathBuf,
        label_column: String,
        columns: Vec<ColumnSpec>,
        #[serde(default)]
        embeddings: Vec<PathBuf>,
        test_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainFile {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Condition {
    pub name: String,
    #[serde(default)]
    pub modalities: Vec<ModalityConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneFile {
    #[serde(default)]
    pub model: ModelConfig,
    pub backbone: BackboneSource,
    pub data: DataSource,
    pub conditions: Vec<Condition>,
    #[serde(default)]
    pub finetune: FineTuneConfig,
    /// Write one checkpoint per condition and seed.
    #[serde(default = "yes")]
    pub save_checkpoints: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    #[serde(default)]
    pub model: ModelConfig,
    /// A full checkpoint, projectors included.
    pub checkpoint: PathBuf,
    pub data: DataSource,
    #[serde(default)]
    pub modalities: Vec<ModalityConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    #[serde(default)]
    pub model: ModelConfig,
    pub backbone: BackboneSource,
    pub sweep: SweepConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum McCase {
    Gaussian {
        n_i: usize,
        n_t: usize,
        d: usize,
        variance: f64,
        #[serde(default)]
        shift: f64,
        samples: usize,
        #[serde(default)]
        seed: u64,
    },
    Constant {
        n_i: usize,
        n_t: usize,
        tabular: f64,
        non_tabular: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McFile {
    pub cases: Vec<McCase>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimilarityFile {
    #[serde(default)]
    pub model: ModelConfig,
    pub backbone: BackboneSource,
    pub data: DataSource,
    pub modalities: Vec<ModalityConfig>,
    /// Fine-tuning before measuring; zero steps measures the fresh model.
    #[serde(default)]
    pub finetune: FineTuneConfig,
    #[serde(default)]
    pub seed: u64,
    /// Measure after this backbone block; absent means the fused input tokens.
    #[serde(default)]
    pub block: Option<usize>,
}

/// Parses `bytes` as `T`, reporting the JSON path of the first error.
pub fn parse<T: DeserializeOwned>(bytes: &[u8], origin: &Path) -> CliResult<T> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    let value = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config(format!("{}: at `{path}`: {}", origin.display(), e.inner()))
    })?;
    de.end().map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))?;
    Ok(value)
}

pub fn load<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&bytes, path)
}

/// Resolves `p` against the directory holding the config file.
pub fn resolve(config_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}
