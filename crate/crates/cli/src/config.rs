//! The TOML run configuration. Every key has a default, so
//!
//! ```toml
//! [train]
//! iterations = 200
//! ```
//!
//! is a complete config. Sections: `[data]`, `[model]`, `[train]`,
//! `[train.quality]`, `[train.allocator]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tsqlora::{data, Activation, Dataset, ModelSpec, TrainConfig};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Gaussian mixture generated from `n`, `dim`, `classes`, `label_noise`.
    Synthetic,
    /// A `.jsonl` or `.csv` file at `path`.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: Source,
    pub path: Option<PathBuf>,
    pub n: usize,
    pub dim: usize,
    pub classes: usize,
    pub label_noise: f64,
    pub eval_fraction: f64,
    /// Seed for generation and splitting; follows the run seed when unset.
    pub seed: Option<u64>,
    /// Standardize loaded feature columns (generated data always is).
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: Source::Synthetic,
            path: None,
            n: 2000,
            dim: 32,
            classes: 10,
            label_noise: 0.2,
            eval_fraction: 0.2,
            seed: None,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Layers carrying adapters; all layers when unset.
    pub adapted: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![32, 32, 32],
            activation: Activation::Relu,
            adapted: Some(vec![0, 1, 2]),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Command-line settings that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            let at = line.map_or(String::new(), |l| format!(" at line {l}"));
            CliError::config(format!("invalid config{at}: {}", e.message().trim()))
        })
    }

    /// Applies overrides and materializes every default.
    pub fn resolve(mut self, overrides: &Overrides) -> Result<Self, CliError> {
        if let Some(seed) = overrides.seed {
            self.train.seed = seed;
        }
        if let Some(threads) = overrides.threads {
            self.train.threads = threads;
        }
        self.train.threads = self.train.threads.max(1);
        self.data.seed.get_or_insert(self.train.seed);
        self.train.allocator = self.train.allocator.resolved();
        self.train.quality.validate()?;
        self.train.allocator.validate()?;
        if self.data.source == Source::File && self.data.path.is_none() {
            return Err(CliError::config("data.source = \"file\" needs data.path"));
        }
        if !(self.data.eval_fraction > 0.0 && self.data.eval_fraction < 1.0) {
            return Err(CliError::config("data.eval_fraction must be in (0, 1)"));
        }
        Ok(self)
    }

    /// Stable identifier of the resolved config; thread count is excluded
    /// because it never changes results.
    pub fn run_id(&self) -> String {
        let mut canonical = self.clone();
        canonical.train.threads = 1;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..6].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.train.seed)
    }

    /// Same config with both run and data seeds set to `seed`, unless the
    /// data seed was pinned explicitly in the file.
    pub fn with_seed(&self, seed: u64, pinned_data_seed: bool) -> Self {
        let mut cfg = self.clone();
        cfg.train.seed = seed;
        if !pinned_data_seed {
            cfg.data.seed = Some(seed);
        }
        cfg
    }

    /// Loads or generates the pool and splits it into train and eval sets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), CliError> {
        let d = &self.data;
        let seed = self.data_seed();
        let pool = match d.source {
            Source::Synthetic => data::gen_gaussian_mixture(seed, d.n, d.dim, d.classes, d.label_noise)
                .map_err(CliError::from)?,
            Source::File => {
                let path = d.path.as_deref().expect("checked in resolve");
                let mut ds = data::load_path(path).map_err(CliError::data)?;
                if d.standardize {
                    ds.standardize();
                }
                ds
            }
        };
        pool.split(d.eval_fraction, seed).map_err(CliError::from)
    }

    pub fn spec(&self, input: usize, classes: usize) -> ModelSpec {
        let mut widths = Vec::with_capacity(self.model.hidden.len() + 2);
        widths.push(input);
        widths.extend(&self.model.hidden);
        widths.push(classes);
        let mut spec = ModelSpec::mlp(widths);
        spec.activation = self.model.activation;
        if let Some(adapted) = &self.model.adapted {
            spec.adapted = adapted.clone();
        }
        spec
    }
}
