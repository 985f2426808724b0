//! Experiment configuration files.
//!
//! A config is a TOML document with a mandatory `version` key. Relative paths
//! are resolved against the directory holding the config file.
//!
//! ```toml
//! version = 1
//! out_dir = "runs/quickstart"
//! seeds = [0, 1, 2]
//! strategy = "ham"            # ham | sam | sam-gs | ham-p | uniform
//! precision = "f64"           # f64 | f32
//!
//! [data]
//! source = "synthetic"        # synthetic | csv | movielens | cache
//! rows = 20000
//! seed = 100
//! fields = [
//!   { cardinality = 30, rank = 6 },
//!   { cardinality = 30, rank = 0 },
//! ]
//!
//! [model]
//! kind = "fm"                 # fm | deep-fm | dcn-v2
//!
//! [search]
//! target_size = 12
//! batch_size = 256
//!
//! [oracle]
//! retrain_steps = 50
//! ```
//!
//! Every `[model]` and `[search]` key is optional and falls back to the
//! library defaults; reports record the fully resolved values.

use std::path::{Path, PathBuf};

use hamprune::data::{ingest, load_movielens, read_csv, read_splits, split, synthesize, IngestOptions, Splits, SyntheticSpec};
use hamprune::models::ModelConfig;
use hamprune::oracle::DEFAULT_RETRAIN_STEPS;
use hamprune::search::{SearchConfig, Strategy};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    /// Fine-tuning mini-batches per candidate mask.
    #[serde(default = "default_retrain_steps")]
    pub retrain_steps: usize,
    /// Mask size to enumerate; defaults to the search target.
    #[serde(default)]
    pub size: Option<usize>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            retrain_steps: DEFAULT_RETRAIN_STEPS,
            size: None,
        }
    }
}

fn default_retrain_steps() -> usize {
    DEFAULT_RETRAIN_STEPS
}

fn default_ratios() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

/// Where the rows come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DataSource {
    /// Planted-signal generator; `seed` drives both generation and the split.
    Synthetic {
        rows: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_ratios")]
        ratios: [f64; 3],
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
    /// Headered CSV with a 0/1 `label` column.
    Csv {
        path: PathBuf,
        #[serde(default)]
        numeric: Vec<String>,
        #[serde(default)]
        ingest: IngestOptions,
    },
    /// Directory holding `ratings.dat`, `users.dat` and `movies.dat`.
    Movielens {
        dir: PathBuf,
        #[serde(default)]
        ingest: IngestOptions,
    },
    /// Binary splits written by `preprocess`.
    Cache { path: PathBuf },
}

impl DataSource {
    fn paths_mut(&mut self) -> Option<&mut PathBuf> {
        match self {
            DataSource::Synthetic { .. } => None,
            DataSource::Csv { path, .. } | DataSource::Cache { path } => Some(path),
            DataSource::Movielens { dir, .. } => Some(dir),
        }
    }

    pub fn load(&self) -> Result<Splits, CliError> {
        let splits = match self {
            DataSource::Synthetic { rows, seed, ratios, spec } => split(&synthesize(spec, *rows, *seed)?, *ratios, *seed)?,
            DataSource::Csv { path, numeric, ingest: opts } => ingest(&read_csv(path, numeric)?, opts)?,
            DataSource::Movielens { dir, ingest: opts } => ingest(&load_movielens(dir)?, opts)?,
            DataSource::Cache { path } => read_splits(path)?,
        };
        Ok(splits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub precision: Precision,
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_strategy() -> Strategy {
    Strategy::Ham
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        if cfg.seeds.is_empty() {
            return Err(CliError::Config("seeds must not be empty".into()));
        }
        Ok(cfg)
    }

    /// Reads `path`, resolves relative paths against its directory and checks
    /// that referenced inputs exist.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        if let Some(p) = cfg.data.paths_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if !p.exists() {
                return Err(CliError::Config(format!("data path {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }
}
