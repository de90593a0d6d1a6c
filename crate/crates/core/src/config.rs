//! Run configuration: one TOML document naming the data source, the training
//! setup and the output directory.
//!
//! ```toml
//! out = "runs/monotone"
//! seed = 0
//! train_rows = 300
//!
//! [generator]
//! m = 360
//! bias_kind = "monotone"
//! noise_std = 0.01
//!
//! [train.hp]
//! w = 25
//! N = 2
//! lr = 0.001
//! ```
//!
//! Relative paths are resolved against the directory holding the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Dataset};
use crate::error::DataError;
use crate::synth::{self, BiasKind, GenConfig};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Synthetic data block. `seed` falls back to the run seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorBlock {
    pub m: usize,
    #[serde(default = "default_features")]
    pub n: usize,
    pub bias_kind: BiasKind,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_features() -> usize {
    3
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Held-out split; when absent the main dataset is split at `train_rows`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorBlock>,
    /// Leading rows used for training. Defaults to five sixths of the rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_rows: Option<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Overrides the training seed and, unless the generator sets its own,
    /// the generator seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            eval_dataset: None,
            generator: None,
            train_rows: None,
            train: TrainConfig::default(),
            out: default_out(),
            seed: None,
        }
    }
}

/// Training and evaluation splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub eval: Option<Dataset>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    /// Read, resolve relative paths and validate.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.dataset.as_mut() {
            join(p);
        }
        if let Some(p) = self.eval_dataset.as_mut() {
            join(p);
        }
        join(&mut self.out);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        match (&self.dataset, &self.generator) {
            (Some(_), Some(_)) => return bad("give either `dataset` or `[generator]`, not both".into()),
            (None, None) => return bad("one of `dataset` or `[generator]` is required".into()),
            _ => {}
        }
        for p in [&self.dataset, &self.eval_dataset].into_iter().flatten() {
            if !p.is_file() {
                return bad(format!("dataset {} does not exist", p.display()));
            }
        }
        if let Some(g) = self.gen_config() {
            g.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.train_rows == Some(0) {
            return bad("train_rows must be >= 1".into());
        }
        self.train_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Training config with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        let mut tc = self.train.clone();
        if let Some(seed) = self.seed {
            tc.hp.seed = seed;
        }
        tc
    }

    pub fn gen_config(&self) -> Option<GenConfig> {
        self.generator.as_ref().map(|g| GenConfig {
            m: g.m,
            n: g.n,
            seed: g.seed.or(self.seed).unwrap_or(0),
            bias_kind: g.bias_kind,
            noise_std: g.noise_std,
        })
    }

    /// The full dataset named by the config, before splitting.
    pub fn dataset(&self) -> Result<Dataset, DataError> {
        match (&self.dataset, self.gen_config()) {
            (Some(path), _) => data::load_csv(path),
            (None, Some(g)) => synth::generate(&g),
            (None, None) => Err(DataError::Invalid("no data source configured".into())),
        }
    }

    pub fn splits(&self) -> Result<Splits, DataError> {
        let full = self.dataset()?;
        if let Some(path) = &self.eval_dataset {
            let eval = data::load_csv(path)?;
            if eval.feature_names() != full.feature_names() {
                return Err(DataError::Invalid(format!(
                    "eval dataset features {:?} differ from training features {:?}",
                    eval.feature_names(),
                    full.feature_names()
                )));
            }
            let train = match self.train_rows {
                Some(rows) if rows < full.m() => full.split_at(rows)?.0,
                _ => full,
            };
            return Ok(Splits { train, eval: Some(eval) });
        }
        let rows = self.train_rows.unwrap_or(full.m() - full.m() / 6);
        if rows >= full.m() {
            return Ok(Splits { train: full, eval: None });
        }
        let (train, eval) = full.split_at(rows)?;
        Ok(Splits { train, eval: Some(eval) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GENERATED: &str = r#"
        seed = 4
        [generator]
        m = 360
        bias_kind = "monotone"
        noise_std = 0.01
        [train.hp]
        w = 9
        N = 3
    "#;

    #[test]
    fn generator_config_splits_300_60() {
        let cfg = RunConfig::parse(GENERATED).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train_config().hp.repetitions, 3);
        assert_eq!(cfg.train_config().hp.seed, 4);
        assert_eq!(cfg.gen_config().unwrap().seed, 4);
        let s = cfg.splits().unwrap();
        assert_eq!(s.train.m(), 300);
        assert_eq!(s.eval.unwrap().m(), 60);
    }

    #[test]
    fn exactly_one_source() {
        let mut cfg = RunConfig::parse(GENERATED).unwrap();
        cfg.dataset = Some("x.csv".into());
        assert!(cfg.validate().is_err());
        cfg.dataset = None;
        cfg.generator = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn missing_dataset_rejected() {
        let cfg = RunConfig::parse("dataset = \"/nonexistent/rows.csv\"").unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn unknown_bias_kind_is_a_parse_error() {
        let text = GENERATED.replace("monotone", "sawtooth");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::parse(GENERATED).unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn bad_window_rejected() {
        let text = GENERATED.replace("w = 9", "w = 8");
        assert!(RunConfig::parse(&text).unwrap().validate().is_err());
    }
}
