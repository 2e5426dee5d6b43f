//! Experiment configuration files (TOML).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use whvi::data::SyntheticFunction;
use whvi::models::{BnnSpec, GpSpec, GpWeights, LayerKind, ModelSpec};
use whvi::train::TrainConfig;
use whvi::whvi::CovarianceMode;

#[derive(Debug, Error)]
#[error("{message}")]
pub struct ConfigError {
    pub message: String,
    /// Offending field, when known.
    pub field: Option<String>,
    /// Closest valid field name for an unknown one.
    pub suggestion: Option<String>,
}

impl ConfigError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        Self {
            message: format!("{field}: {}", message.into()),
            field: Some(field.to_string()),
            suggestion: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    BnnWhvi,
    BnnMeanfield,
    GpWhvi,
    GpMeanfieldMatched,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            Self::BnnWhvi => "bnn-whvi",
            Self::BnnMeanfield => "bnn-meanfield",
            Self::GpWhvi => "gp-whvi",
            Self::GpMeanfieldMatched => "gp-meanfield-matched",
        }
    }
}

fn default_fraction() -> f64 {
    0.9
}

fn default_synth_n() -> usize {
    10_000
}

/// Either a manifest-listed CSV (`name`) or a synthetic function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Target columns to model; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticFunction>,
    #[serde(default = "default_synth_n")]
    pub n: usize,
    #[serde(default)]
    pub noise_std: f64,
    /// Seed of the synthetic design and its noise; splits use the run seeds.
    #[serde(default)]
    pub generation_seed: u64,
    #[serde(default = "default_fraction")]
    pub train_fraction: f64,
}

fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}
fn yes() -> bool {
    true
}
fn default_noise_std() -> f64 {
    0.1
}
fn default_gp_d() -> usize {
    16
}
fn one() -> usize {
    1
}
fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureConfig {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    /// Hadamard dimension of BNN hidden layers; derived when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hadamard_dim: Option<usize>,
    #[serde(default = "yes")]
    pub bias: bool,
    #[serde(default = "yes")]
    pub learn_noise: bool,
    #[serde(default = "default_noise_std")]
    pub init_noise_std: f64,
    #[serde(default = "yes")]
    pub rescale_output: bool,
    #[serde(default = "default_gp_d")]
    pub gp_hadamard_dim: usize,
    #[serde(default = "one")]
    pub gp_blocks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gp_features: Option<usize>,
    #[serde(default = "unit")]
    pub init_lengthscale: f64,
    #[serde(default = "unit")]
    pub init_amplitude: f64,
    #[serde(default = "yes")]
    pub learn_kernel: bool,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields defaulted")
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/experiment")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub covariance: CovarianceMode,
    /// One train/test split and training run per seed.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Seeds trained concurrently.
    #[serde(default = "one")]
    pub workers: usize,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub training: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(parse_error)?;
        config.validate()?;
        Ok(config)
    }

    /// TOML with every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::field("seeds", "at least one seed is required"));
        }
        if self.workers == 0 || self.workers > 256 {
            return Err(ConfigError::field("workers", "must lie in 1..=256"));
        }
        let d = &self.dataset;
        match (&d.name, &d.synthetic) {
            (Some(_), None) => {
                if d.manifest.is_none() {
                    return Err(ConfigError::field("dataset.manifest", "required for a named dataset"));
                }
            }
            (None, Some(_)) => {
                if d.n < 2 || d.n > 10_000_000 {
                    return Err(ConfigError::field("dataset.n", "must lie in 2..=10000000"));
                }
                if !(d.noise_std >= 0.0 && d.noise_std.is_finite()) {
                    return Err(ConfigError::field(
                        "dataset.noise_std",
                        "must be finite and non-negative",
                    ));
                }
            }
            _ => {
                return Err(ConfigError::field(
                    "dataset",
                    "set exactly one of `name` (with `manifest`) or `synthetic`",
                ))
            }
        }
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return Err(ConfigError::field(
                "dataset.train_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        if matches!(&d.targets, Some(t) if t.is_empty()) {
            return Err(ConfigError::field("dataset.targets", "must not be empty"));
        }
        let a = &self.architecture;
        if a.hidden.iter().any(|&w| w == 0 || w > 65_536) {
            return Err(ConfigError::field(
                "architecture.hidden",
                "widths must lie in 1..=65536",
            ));
        }
        let pow2 = |v: usize| v.is_power_of_two() && v <= 1 << 20;
        if matches!(a.hadamard_dim, Some(v) if !pow2(v)) {
            return Err(ConfigError::field(
                "architecture.hadamard_dim",
                "must be a power of two ≤ 2^20",
            ));
        }
        if !pow2(a.gp_hadamard_dim) || a.gp_hadamard_dim > 1024 {
            return Err(ConfigError::field(
                "architecture.gp_hadamard_dim",
                "must be a power of two ≤ 1024",
            ));
        }
        if a.gp_blocks == 0 || a.gp_blocks > 1024 {
            return Err(ConfigError::field("architecture.gp_blocks", "must lie in 1..=1024"));
        }
        if matches!(a.gp_features, Some(0)) {
            return Err(ConfigError::field("architecture.gp_features", "must be positive"));
        }
        for (field, v) in [
            ("architecture.init_noise_std", a.init_noise_std),
            ("architecture.init_lengthscale", a.init_lengthscale),
            ("architecture.init_amplitude", a.init_amplitude),
        ] {
            if !(v > 0.0 && v <= 1e6) {
                return Err(ConfigError::field(field, "must lie in (0, 1e6]"));
            }
        }
        self.training.validate().map_err(|e| match e {
            whvi::train::TrainError::Config { field, message } => {
                ConfigError::field(&format!("training.{field}"), message)
            }
            other => ConfigError {
                message: other.to_string(),
                field: None,
                suggestion: None,
            },
        })
    }

    /// Model description for a dataset with the given widths.
    pub fn model_spec(&self, in_dim: usize, out_dim: usize) -> ModelSpec {
        let a = &self.architecture;
        match self.model {
            ModelKind::BnnWhvi | ModelKind::BnnMeanfield => ModelSpec::Bnn(BnnSpec {
                in_dim,
                out_dim,
                hidden: a.hidden.clone(),
                hidden_kind: if self.model == ModelKind::BnnWhvi {
                    LayerKind::Whvi
                } else {
                    LayerKind::MeanField
                },
                covariance: self.covariance,
                hadamard_dim: a.hadamard_dim,
                bias: a.bias,
                learn_noise: a.learn_noise,
                init_noise_std: a.init_noise_std,
                rescale_output: a.rescale_output,
            }),
            ModelKind::GpWhvi | ModelKind::GpMeanfieldMatched => ModelSpec::Gp(GpSpec {
                in_dim,
                weights: if self.model == ModelKind::GpWhvi {
                    GpWeights::Whvi
                } else {
                    GpWeights::MeanFieldMatched
                },
                hadamard_dim: a.gp_hadamard_dim,
                blocks: a.gp_blocks,
                covariance: self.covariance,
                features: a.gp_features,
                init_lengthscale: a.init_lengthscale,
                init_amplitude: a.init_amplitude,
                init_noise_std: a.init_noise_std,
                learn_noise: a.learn_noise,
                learn_kernel: a.learn_kernel,
                rescale_output: a.rescale_output,
            }),
        }
    }
}

/// Turns serde's "unknown field `x`, expected one of `a`, `b`" into an error
/// that names the field and suggests the closest valid one.
fn parse_error(e: toml::de::Error) -> ConfigError {
    let msg = e.message().to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some((field, tail)) = rest.split_once('`') {
            let candidates: Vec<&str> = tail.split('`').skip(1).step_by(2).collect();
            let suggestion = candidates
                .iter()
                .map(|c| (strsim::jaro_winkler(field, c), *c))
                .filter(|(score, _)| *score > 0.8)
                .max_by(|a, b| a.0.total_cmp(&b.0))
                .map(|(_, c)| c.to_string());
            let hint = suggestion
                .as_ref()
                .map(|s| format!("; did you mean `{s}`?"))
                .unwrap_or_default();
            return ConfigError {
                message: format!("unknown field `{field}`{hint}"),
                field: Some(field.to_string()),
                suggestion,
            };
        }
    }
    ConfigError {
        message: e.to_string(),
        field: None,
        suggestion: None,
    }
}
