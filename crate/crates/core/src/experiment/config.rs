use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::FederationConfig;
use crate::error::{FlError, Result};
use crate::model::{Activation, ModelSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Fedavg,
    Multicenter,
    Hierarchical,
    Hypothesis,
    Mixture,
    Proximal,
    Onestep,
    Distill,
    Oneshot,
    Oneclass,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Fedavg => "fedavg",
            StrategyKind::Multicenter => "multicenter",
            StrategyKind::Hierarchical => "hierarchical",
            StrategyKind::Hypothesis => "hypothesis",
            StrategyKind::Mixture => "mixture",
            StrategyKind::Proximal => "proximal",
            StrategyKind::Onestep => "onestep",
            StrategyKind::Distill => "distill",
            StrategyKind::Oneshot => "oneshot",
            StrategyKind::Oneclass => "oneclass",
        }
    }

    /// Strategies whose clients may run different architectures.
    pub fn is_heterogeneous(self) -> bool {
        matches!(self, StrategyKind::Distill | StrategyKind::Oneshot)
    }
}

fn default_activation() -> Activation {
    Activation::Relu
}

/// Architecture description; input and output sizes come from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelConfig {
    Logistic,
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
    /// `hidden` lists the encoder widths; the decoder mirrors them.
    Autoencoder {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
    },
}

impl ModelConfig {
    pub fn to_spec(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
        match self {
            ModelConfig::Logistic => ModelSpec::logistic(input_dim, num_classes),
            ModelConfig::Mlp { hidden, activation } => {
                let mut dims = vec![input_dim];
                dims.extend(hidden);
                dims.push(num_classes);
                ModelSpec::mlp(&dims, *activation)
            }
            ModelConfig::Autoencoder { hidden, activation } => {
                let mut dims = vec![input_dim];
                dims.extend(hidden);
                dims.extend(hidden.iter().rev().skip(1));
                dims.push(input_dim);
                ModelSpec::autoencoder(&dims, *activation)
            }
        }
    }
}

fn d_lr() -> f64 {
    0.1
}
fn d_one() -> usize {
    1
}
fn d_batch() -> usize {
    16
}
fn d_rounds() -> usize {
    10
}
fn d_temperature() -> f64 {
    2.0
}
fn d_fraction() -> f64 {
    1.0
}
fn d_min_cluster() -> usize {
    2
}
fn d_split_rounds() -> usize {
    3
}
fn d_personal_steps() -> usize {
    20
}
fn d_true() -> bool {
    true
}
fn d_calibration() -> f64 {
    0.2
}

/// Flat hyperparameter block shared by every strategy. Fields that only
/// some strategies need are optional and checked by [`ExperimentConfig::validate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_one")]
    pub local_epochs: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_rounds")]
    pub rounds: usize,
    #[serde(default = "d_fraction")]
    pub sample_fraction: f64,
    /// Number of cluster models.
    #[serde(default, alias = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    /// Per-client access budget; absent means unlimited.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_accesses: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_select: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_fpr: Option<f64>,
    #[serde(default)]
    pub split_threshold: f64,
    #[serde(default = "d_min_cluster")]
    pub min_cluster_size: usize,
    #[serde(default = "d_split_rounds")]
    pub split_rounds: usize,
    /// Local steps for the proximal personal model.
    #[serde(default = "d_personal_steps")]
    pub personal_steps: usize,
    #[serde(default = "d_true")]
    pub leave_one_out: bool,
    /// Share of each client's normal rows held out for threshold calibration.
    #[serde(default = "d_calibration")]
    pub calibration_share: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all hyperparameters have defaults")
    }
}

fn d_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Generate a synthetic federation from this description...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub federation: Option<FederationConfig>,
    /// ...or load a saved one from this directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    pub strategy: StrategyKind,
    /// Defaults to logistic regression, or a one-layer autoencoder for
    /// `oneclass`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    /// Architectures assigned round-robin by client id (distill, oneshot).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hetero_models: Option<Vec<ModelConfig>>,
    #[serde(default)]
    pub hyperparams: Hyperparams,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_output")]
    pub output_dir: PathBuf,
}

fn missing(field: &str, strategy: StrategyKind) -> FlError {
    FlError::config(format!("hyperparams.{field} is required for strategy {}", strategy.name()))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| FlError::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => FlError::MissingArtifact(path.display().to_string()),
            _ => FlError::Io(e),
        })?;
        let cfg = ExperimentConfig::from_json(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks strategy-specific requirements and value ranges.
    pub fn validate(&self) -> Result<()> {
        let h = &self.hyperparams;
        let s = self.strategy;
        match (&self.federation, &self.data_dir) {
            (Some(f), None) => f.validate()?,
            (None, Some(_)) => {}
            _ => return Err(FlError::config("exactly one of federation or data_dir must be given")),
        }
        if h.rounds < 1 {
            return Err(FlError::config("hyperparams.rounds must be at least 1"));
        }
        if !(h.lr > 0.0 && h.lr.is_finite()) {
            return Err(FlError::config("hyperparams.lr must be positive"));
        }
        if h.batch_size == 0 {
            return Err(FlError::config("hyperparams.batch_size must be at least 1"));
        }
        if !(h.sample_fraction > 0.0 && h.sample_fraction <= 1.0) {
            return Err(FlError::config("hyperparams.sample_fraction must lie in (0, 1]"));
        }
        if !(h.temperature > 0.0 && h.temperature.is_finite()) {
            return Err(FlError::config("hyperparams.temperature must be positive"));
        }
        match s {
            StrategyKind::Multicenter | StrategyKind::Hypothesis => match h.k {
                None => return Err(missing("k", s)),
                Some(0) => return Err(FlError::config("hyperparams.k must be at least 1")),
                Some(_) => {}
            },
            StrategyKind::Mixture | StrategyKind::Proximal | StrategyKind::Distill => match h.lambda {
                None => return Err(missing("lambda", s)),
                Some(l) if !(l >= 0.0 && l.is_finite()) => {
                    return Err(FlError::config("hyperparams.lambda must be non-negative"))
                }
                Some(_) => {}
            },
            StrategyKind::Onestep => match h.alpha {
                None => return Err(missing("alpha", s)),
                Some(a) if !(a > 0.0 && a.is_finite()) => {
                    return Err(FlError::config("hyperparams.alpha must be positive"))
                }
                Some(_) => {}
            },
            StrategyKind::Oneshot => match h.k_select {
                None => return Err(missing("k_select", s)),
                Some(0) => return Err(FlError::config("hyperparams.k_select must be at least 1")),
                Some(_) => {}
            },
            StrategyKind::Oneclass => {
                match h.target_fpr {
                    None => return Err(missing("target_fpr", s)),
                    Some(f) if !(f > 0.0 && f < 1.0) => {
                        return Err(FlError::config("hyperparams.target_fpr must lie in (0, 1)"))
                    }
                    Some(_) => {}
                }
                if !(0.0..1.0).contains(&h.calibration_share) {
                    return Err(FlError::config("hyperparams.calibration_share must lie in [0, 1)"));
                }
            }
            StrategyKind::Fedavg | StrategyKind::Hierarchical => {}
        }
        if self.hetero_models.is_some() && !s.is_heterogeneous() {
            return Err(FlError::config(format!(
                "hetero_models is only supported by distill and oneshot, not {}",
                s.name()
            )));
        }
        if self.hetero_models.as_ref().is_some_and(Vec::is_empty) {
            return Err(FlError::config("hetero_models must not be empty"));
        }
        let autoencoder = matches!(self.model, Some(ModelConfig::Autoencoder { .. }));
        if (s == StrategyKind::Oneclass) != autoencoder && self.model.is_some() {
            return Err(FlError::config("oneclass needs an autoencoder model and every other strategy a classifier"));
        }
        if let Some(f) = &self.federation {
            self.model_spec(f.input_dim, f.num_classes)?;
            if let Some(ms) = &self.hetero_models {
                for m in ms {
                    m.to_spec(f.input_dim, f.num_classes).map_err(|e| FlError::config(format!("hetero_models: {e}")))?;
                }
            }
        }
        Ok(())
    }

    /// The shared architecture for the given data shape.
    pub fn model_spec(&self, input_dim: usize, num_classes: usize) -> Result<ModelSpec> {
        let model = match (&self.model, self.strategy) {
            (Some(m), _) => m.clone(),
            (None, StrategyKind::Oneclass) => {
                ModelConfig::Autoencoder { hidden: vec![input_dim.div_ceil(2).max(1)], activation: Activation::Tanh }
            }
            (None, _) => ModelConfig::Logistic,
        };
        model.to_spec(input_dim, num_classes).map_err(|e| FlError::config(format!("model: {e}")))
    }
}
