//! Run configuration: a TOML file of flat `key = value` sections, one per
//! subcommand, plus `--set key=value` overrides on the command line.
//!
//! Every section is checked for unknown keys whether or not it is used, and
//! the resolved section is echoed into the run directory as `config.toml`.

use std::path::Path;

use anyhow::{bail, Context, Result};
use count_adapt::regressor::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Optimiser and schedule keys shared by every training section.
macro_rules! train_section {
    ($name:ident from $base:expr, { $($field:ident : $ty:ty = $default:expr),* $(,)? }) => {
        #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
        #[serde(deny_unknown_fields, default)]
        pub struct $name {
            pub learning_rate: f64,
            pub weight_decay: f64,
            pub adagrad_epsilon: f64,
            pub adagrad_initial_accumulator: f64,
            pub recalibrate_running_stats: bool,
            pub iterations: usize,
            pub batch_size: usize,
            pub seed: u64,
            pub patch_size: usize,
            pub split: String,
            $(pub $field: $ty,)*
        }

        impl Default for $name {
            fn default() -> Self {
                let t: TrainConfig = $base;
                $name {
                    learning_rate: t.learning_rate,
                    weight_decay: t.weight_decay,
                    adagrad_epsilon: t.adagrad_epsilon,
                    adagrad_initial_accumulator: t.adagrad_initial_accumulator,
                    recalibrate_running_stats: t.recalibrate_running_stats,
                    iterations: t.iterations,
                    batch_size: t.batch_size,
                    seed: t.seed,
                    patch_size: 32,
                    split: "train".into(),
                    $($field: $default,)*
                }
            }
        }

        impl $name {
            pub fn train_config(&self) -> TrainConfig {
                TrainConfig {
                    learning_rate: self.learning_rate,
                    weight_decay: self.weight_decay,
                    adagrad_epsilon: self.adagrad_epsilon,
                    adagrad_initial_accumulator: self.adagrad_initial_accumulator,
                    recalibrate_running_stats: self.recalibrate_running_stats,
                    iterations: self.iterations,
                    batch_size: self.batch_size,
                    seed: self.seed,
                }
            }
        }
    };
}

train_section!(PrimeConfig from TrainConfig::default(), {
    feature_dim: usize = 64,
    extractor_seed: u64 = 0,
    model_seed: u64 = 1,
    hflip: bool = false,
});

train_section!(AdaptConfig from TrainConfig::default(), {
    hflip: bool = false,
});

train_section!(RefinerConfig from TrainConfig::refiner_default(), {});

train_section!(ClassifierConfig from TrainConfig::default(), {
    head_seed: u64 = 5,
});

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub height: usize,
    pub width: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            height: 128,
            width: 128,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub patch_size: usize,
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            patch_size: 32,
            split: "val".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub patch_size: usize,
    /// `patch-vote` or `whole-image`, used by `--auto-domain`.
    pub classify_mode: String,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            patch_size: 32,
            classify_mode: "patch-vote".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmptyConfig {}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    #[serde(rename = "gen-data")]
    pub gen_data: GenDataConfig,
    pub prime: PrimeConfig,
    pub adapt: AdaptConfig,
    #[serde(rename = "train-refiner")]
    pub train_refiner: RefinerConfig,
    #[serde(rename = "train-classifier")]
    pub train_classifier: ClassifierConfig,
    pub eval: EvalConfig,
    pub predict: PredictConfig,
    pub audit: EmptyConfig,
    #[serde(rename = "grad-check")]
    pub grad_check: EmptyConfig,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| anyhow::anyhow!(one_line(&e.to_string())))
    }
}

pub fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Apply `key=value` overrides to a section. Values are read as TOML
/// literals, falling back to a bare string.
pub fn apply_overrides<S: Serialize + DeserializeOwned>(
    section: &S,
    name: &str,
    overrides: &[String],
) -> Result<S> {
    let mut table = toml::Table::try_from(section).context("serialising config section")?;
    for kv in overrides {
        let Some((key, raw)) = kv.split_once('=') else {
            bail!("override `{kv}` is not of the form key=value");
        };
        let key = key.trim();
        if !table.contains_key(key) {
            bail!("unknown key `{key}` for [{name}]");
        }
        let raw = raw.trim();
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.to_string(), value);
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("[{name}] {}", one_line(&e.to_string())))
}

/// `[name]` followed by the section's keys.
pub fn render_section<S: Serialize>(name: &str, section: &S) -> Result<String> {
    let body = toml::to_string(section).context("serialising config section")?;
    Ok(format!("[{name}]\n{body}"))
}
