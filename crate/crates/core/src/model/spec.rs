use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FlError, Result};
use crate::model::ParamVector;
use crate::rng::{derive_seed, rng_from, tags};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Logistic,
    Mlp,
    Autoencoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    SoftmaxClassifier,
    LinearReconstruction,
}

/// Architecture descriptor. Parameters are laid out layer by layer, each
/// layer as a row-major `[out x in]` weight block followed by `out` biases.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub output: OutputHead,
}

/// Position of one dense layer inside a flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub fan_in: usize,
    pub fan_out: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

pub const MAX_HIDDEN_LAYERS: usize = 3;

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Logistic,
            layer_dims: vec![input_dim, num_classes],
            activation: Activation::Tanh,
            output: OutputHead::SoftmaxClassifier,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            layer_dims: layer_dims.to_vec(),
            activation,
            output: OutputHead::SoftmaxClassifier,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn autoencoder(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Autoencoder,
            layer_dims: layer_dims.to_vec(),
            activation,
            output: OutputHead::LinearReconstruction,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = &self.layer_dims;
        if dims.len() < 2 {
            return Err(FlError::config("layer_dims needs at least two entries"));
        }
        if dims.contains(&0) {
            return Err(FlError::config("layer_dims entries must be positive"));
        }
        match self.kind {
            ModelKind::Logistic => {
                if dims.len() != 2 {
                    return Err(FlError::config("logistic model takes exactly [input, classes]"));
                }
            }
            ModelKind::Mlp => {
                if dims.len() < 3 || dims.len() > MAX_HIDDEN_LAYERS + 2 {
                    return Err(FlError::config(format!(
                        "mlp needs between 1 and {MAX_HIDDEN_LAYERS} hidden layers"
                    )));
                }
            }
            ModelKind::Autoencoder => {
                if dims.len() < 3 {
                    return Err(FlError::config("autoencoder needs a bottleneck layer"));
                }
                let n = dims.len();
                if (0..n / 2).any(|i| dims[i] != dims[n - 1 - i]) {
                    return Err(FlError::config("autoencoder dims must be symmetric"));
                }
                let bottleneck = dims.iter().copied().min().unwrap_or(0);
                if bottleneck >= dims[0] {
                    return Err(FlError::config(
                        "autoencoder bottleneck must be smaller than the input dim",
                    ));
                }
            }
        }
        let expected_head = match self.kind {
            ModelKind::Autoencoder => OutputHead::LinearReconstruction,
            _ => OutputHead::SoftmaxClassifier,
        };
        if self.output != expected_head {
            return Err(FlError::config(format!(
                "{:?} model requires {:?} output",
                self.kind, expected_head
            )));
        }
        if self.is_classifier() && self.output_dim() < 2 {
            return Err(FlError::config("classifier needs at least two classes"));
        }
        Ok(())
    }

    pub fn is_classifier(&self) -> bool {
        self.output == OutputHead::SoftmaxClassifier
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.is_classifier().then(|| self.output_dim())
    }

    pub fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let shape = LayerShape { fan_in: w[0], fan_out: w[1], offset };
                offset += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = rng_from(derive_seed(seed, &[tags::INIT]));
        let mut values = vec![0.0; self.param_count()];
        for layer in self.layers() {
            let r = 1.0 / (layer.fan_in as f64).sqrt();
            for v in &mut values[layer.weight_range()] {
                *v = rng.random_range(-r..=r);
            }
        }
        ParamVector::from_vec_unchecked(values)
    }

    /// Stable 64-bit fingerprint of the architecture.
    pub fn fingerprint(&self) -> u64 {
        let json = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }
}
