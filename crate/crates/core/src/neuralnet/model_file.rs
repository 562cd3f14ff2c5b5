//! JSON model files: architecture header plus base64-encoded little-endian
//! `f64` parameters in declared layer order.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Conv2dLayer, DenseLayer, Layer};
use super::network::{Network, Standardizer};
use super::train::TrainConfig;
use crate::error::{Error, Result};

pub const MODEL_FORMAT: &str = "ksid-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        activation: Activation,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 2],
        stride: [usize; 2],
        padding: String,
        activation: Activation,
    },
    Flatten,
    Unflatten {
        shape: Vec<usize>,
    },
    Upsample {
        factor: [usize; 2],
    },
}

impl From<&Layer> for LayerSpec {
    fn from(l: &Layer) -> Self {
        match l {
            Layer::Dense(d) => LayerSpec::Dense {
                inputs: d.inputs,
                outputs: d.outputs,
                activation: d.activation,
            },
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: [c.kernel.0, c.kernel.1],
                stride: [c.stride.0, c.stride.1],
                padding: "same".into(),
                activation: c.activation,
            },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Unflatten(s) => LayerSpec::Unflatten { shape: s.clone() },
            Layer::Upsample { factor } => LayerSpec::Upsample {
                factor: [factor.0, factor.1],
            },
        }
    }
}

impl LayerSpec {
    fn build(&self) -> Result<Layer> {
        Ok(match self {
            LayerSpec::Dense {
                inputs,
                outputs,
                activation,
            } => Layer::Dense(DenseLayer {
                inputs: *inputs,
                outputs: *outputs,
                weights: vec![0.0; inputs * outputs],
                bias: vec![0.0; *outputs],
                activation: *activation,
            }),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                activation,
            } => {
                if padding != "same" {
                    return Err(Error::Format(format!("unsupported padding {padding:?}")));
                }
                Layer::Conv2d(Conv2dLayer {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    kernel: (kernel[0], kernel[1]),
                    stride: (stride[0], stride[1]),
                    kernels: vec![0.0; out_channels * in_channels * kernel[0] * kernel[1]],
                    bias: vec![0.0; *out_channels],
                    activation: *activation,
                })
            }
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Unflatten { shape } => Layer::Unflatten(shape.clone()),
            LayerSpec::Upsample { factor } => Layer::Upsample {
                factor: (factor[0], factor[1]),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub input_shape: Vec<usize>,
    pub latent_boundary: usize,
    pub layers: Vec<LayerSpec>,
    pub normalization: Option<Standardizer>,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub param_count: usize,
    /// Little-endian f64 parameters, base64.
    pub params: String,
}

impl ModelFile {
    pub fn from_network(net: &Network, train_config: Option<&TrainConfig>) -> Self {
        let bytes: Vec<u8> = net.flat_params().iter().flat_map(|p| p.to_le_bytes()).collect();
        Self {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            input_shape: net.input_shape.clone(),
            latent_boundary: net.latent_boundary,
            layers: net.layers.iter().map(LayerSpec::from).collect(),
            normalization: net.input_norm.clone(),
            seed: net.seed,
            train_config: train_config.cloned(),
            param_count: net.param_count(),
            params: B64.encode(bytes),
        }
    }

    pub fn to_network(&self) -> Result<Network> {
        if self.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a model file: format {:?}", self.format)));
        }
        if self.version != MODEL_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", self.version)));
        }
        let layers = self.layers.iter().map(LayerSpec::build).collect::<Result<Vec<_>>>()?;
        let mut net = Network::new(self.input_shape.clone(), layers, self.latent_boundary)?;
        let bytes = B64
            .decode(&self.params)
            .map_err(|e| Error::Format(format!("bad parameter blob: {e}")))?;
        if bytes.len() != 8 * self.param_count {
            return Err(Error::Format(format!(
                "parameter blob holds {} bytes, expected {}",
                bytes.len(),
                8 * self.param_count
            )));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        net.set_flat_params(&params)?;
        net.input_norm = self.normalization.clone();
        net.seed = self.seed;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
