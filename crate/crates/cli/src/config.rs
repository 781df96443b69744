//! Run configuration: profile defaults, then a TOML file, then flags.

use std::fs;
use std::path::Path;

use ambienc_core::dataset::{DatasetConfig, Profile, Variant};
use ambienc_nn::{NetworkConfig, TrainConfig};
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const RUN_CONFIG_FILE: &str = "run_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub log_every: usize,
    pub variants: Vec<Variant>,
    /// Draw new source clips every epoch instead of the rendered ones.
    pub fresh_sources: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub beta: f64,
    pub grid_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub variants: Vec<Variant>,
    /// Evaluate at most this many examples; 0 means all.
    pub max_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub network: NetworkConfig,
    pub train: TrainSection,
    pub baseline: BaselineSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn defaults(profile: Profile, seed: u64) -> Self {
        let (network, train) = match profile {
            Profile::Desk => (
                NetworkConfig::desk(),
                TrainSection {
                    lr: 1e-3,
                    batch: 4,
                    steps: 500,
                    log_every: 25,
                    variants: vec![Variant::Dry, Variant::Wet],
                    fresh_sources: false,
                },
            ),
            Profile::Paper => (
                NetworkConfig::default(),
                TrainSection {
                    lr: 2e-4,
                    batch: 32,
                    steps: 100_000,
                    log_every: 100,
                    variants: vec![Variant::Dry, Variant::Wet],
                    fresh_sources: true,
                },
            ),
        };
        Self {
            profile,
            seed,
            dataset: DatasetConfig::for_profile(profile, seed),
            network,
            train,
            baseline: BaselineSection {
                beta: 0.01,
                grid_points: 1008,
            },
            eval: EvalSection {
                variants: vec![Variant::Dry, Variant::Wet],
                max_examples: 0,
            },
        }
    }

    /// Resolves the configuration. Flags win over the file, the file wins
    /// over profile defaults.
    pub fn resolve(file: Option<&Path>, profile: Option<Profile>, seed: Option<u64>) -> Result<Self> {
        let overrides = match file {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
                let value: toml::Table = toml::from_str(&text)
                    .map_err(|e| UsageError(format!("invalid config {}: {e}", path.display())))?;
                value
            }
            None => toml::Table::new(),
        };
        let profile = match profile {
            Some(p) => p,
            None => match overrides.get("profile") {
                Some(v) => v
                    .as_str()
                    .ok_or_else(|| UsageError("profile must be a string".into()))?
                    .parse()
                    .map_err(|e| UsageError(format!("{e}")))?,
                None => Profile::Desk,
            },
        };
        let seed = match seed {
            Some(s) => s,
            None => match overrides.get("seed") {
                Some(v) => {
                    let s = v.as_integer().ok_or_else(|| UsageError("seed must be an integer".into()))?;
                    u64::try_from(s).map_err(|_| UsageError("seed must be non-negative".into()))?
                }
                None => 0,
            },
        };
        let mut merged = toml::Table::try_from(Self::defaults(profile, seed)).context("serializing defaults")?;
        merge(&mut merged, overrides);
        merged.insert("profile".into(), toml::Value::String(profile.to_string()));
        merged.insert("seed".into(), toml::Value::Integer(seed as i64));
        let mut cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| UsageError(format!("invalid configuration: {e}")))?;
        cfg.dataset.profile = profile;
        cfg.dataset.seed = seed;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch: self.train.batch,
            steps: self.train.steps,
            seed: self.seed,
            log_every: self.train.log_every,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate().map_err(|e| UsageError(e.to_string()))?;
        self.network.validate().map_err(|e| UsageError(e.to_string()))?;
        self.train_config().validate().map_err(|e| UsageError(e.to_string()))?;
        let d = &self.dataset;
        let n = &self.network;
        if n.mics != d.mics || n.order != d.order || n.sample_rate != d.sample_rate {
            bail!(UsageError(format!(
                "network expects {} mics, order {} at {} Hz but the dataset has {} mics, order {} at {} Hz",
                n.mics, n.order, n.sample_rate, d.mics, d.order, d.sample_rate
            )));
        }
        if !(self.baseline.beta >= 0.0) || self.baseline.grid_points == 0 {
            bail!(UsageError("baseline needs beta ≥ 0 and a non-empty grid".into()));
        }
        if self.train.variants.is_empty() || self.eval.variants.is_empty() {
            bail!(UsageError("variant lists must not be empty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Recursive table merge; non-table values in `src` replace those in `dst`.
fn merge(dst: &mut toml::Table, src: toml::Table) {
    for (k, v) in src {
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s),
            (_, v) => {
                dst.insert(k, v);
            }
        }
    }
}
