//! Concrete network definitions and the encode / classify entry points.
//!
//! The wheel encoder is five strided 1-D convolutions (leaky rectifiers)
//! followed by one dense layer down to the feature dimension. The supervised
//! model reuses the same backbone with a descending dense stack whose last
//! layer is the triplet embedding, and a separate classification head.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{softmax, LayerSpec, Network, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WheelEncoderConfig {
    pub conv_layers: usize,
    pub filters: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub activation_slope: f32,
    pub feature_dim: usize,
    pub input_length: usize,
}

impl Default for WheelEncoderConfig {
    fn default() -> Self {
        Self {
            conv_layers: 5,
            filters: 10,
            kernel_size: 16,
            stride: 2,
            activation_slope: 0.1,
            feature_dim: 4,
            input_length: crate::prep::SIGNAL_LENGTH,
        }
    }
}

impl WheelEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_layers == 0 || self.filters == 0 || self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::Config("encoder conv layers, filters, kernel and stride must be >= 1".into()));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config(format!("feature dimension must be >= 2, got {}", self.feature_dim)));
        }
        LayerSpec::LeakyRelu {
            slope: self.activation_slope,
        }
        .validate()?;
        self.backbone_output_len().map(|_| ())
    }

    fn backbone_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::with_capacity(2 * self.conv_layers);
        let mut channels = 1;
        for _ in 0..self.conv_layers {
            specs.push(LayerSpec::conv1d(channels, self.filters, self.kernel_size, self.stride));
            specs.push(LayerSpec::LeakyRelu {
                slope: self.activation_slope,
            });
            channels = self.filters;
        }
        specs
    }

    /// Flattened size of the last convolution's output.
    pub fn backbone_output_len(&self) -> Result<usize> {
        let mut len = self.input_length;
        for i in 0..self.conv_layers {
            len = LayerSpec::conv_output_len(len, self.kernel_size, self.stride, (self.kernel_size - 1) / 2).ok_or_else(|| {
                Error::Config(format!(
                    "input length {} underflows at convolution {i}",
                    self.input_length
                ))
            })?;
        }
        Ok(len * self.filters)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedHeadConfig {
    pub hidden_dims: Vec<usize>,
    pub triplet_layer_dim: usize,
    pub output_categories: usize,
}

impl Default for SupervisedHeadConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![64, 32, 16, 8],
            triplet_layer_dim: 8,
            output_categories: 3,
        }
    }
}

impl SupervisedHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.last() != Some(&self.triplet_layer_dim) {
            return Err(Error::Config(format!(
                "triplet layer dimension {} must equal the last hidden dimension {:?}",
                self.triplet_layer_dim,
                self.hidden_dims.last()
            )));
        }
        if self.hidden_dims.windows(2).any(|w| w[1] > w[0]) || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!(
                "hidden dimensions must be positive and descending, got {:?}",
                self.hidden_dims
            )));
        }
        if self.output_categories < 2 {
            return Err(Error::Config("a classifier needs at least two categories".into()));
        }
        Ok(())
    }
}

/// Encoder output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f32>);

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }
}

pub fn build_wheel_encoder(config: &WheelEncoderConfig, seed: u64) -> Result<Network> {
    config.validate()?;
    let mut specs = config.backbone_specs();
    specs.push(LayerSpec::dense(config.backbone_output_len()?, config.feature_dim));
    Network::build(vec![1, config.input_length], &specs, seed)
}

/// Backbone plus the dense stack ending at the triplet layer (linear).
pub fn build_supervised_encoder(backbone: &WheelEncoderConfig, head: &SupervisedHeadConfig, seed: u64) -> Result<Network> {
    backbone.validate()?;
    head.validate()?;
    let mut specs = backbone.backbone_specs();
    let mut width = backbone.backbone_output_len()?;
    for (i, &dim) in head.hidden_dims.iter().enumerate() {
        if i > 0 {
            specs.push(LayerSpec::Relu);
        }
        specs.push(LayerSpec::dense(width, dim));
        width = dim;
    }
    Network::build(vec![1, backbone.input_length], &specs, seed)
}

/// Classification layer on top of the triplet embedding; outputs logits.
pub fn build_classifier_head(head: &SupervisedHeadConfig, seed: u64) -> Result<Network> {
    head.validate()?;
    Network::build(
        vec![head.triplet_layer_dim],
        &[LayerSpec::dense(head.triplet_layer_dim, head.output_categories)],
        seed,
    )
}

pub(crate) fn signal_tensor(network: &Network, signal: &[f32]) -> Result<Tensor> {
    let expected: usize = network.input_shape().iter().product();
    if signal.len() != expected {
        return Err(Error::Dimension(format!(
            "encoder expects a signal of length {expected}, got {}",
            signal.len()
        )));
    }
    if signal.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("signal contains non-finite values".into()));
    }
    Tensor::new(network.input_shape().to_vec(), signal.to_vec())
}

pub fn encode(network: &Network, signal: &[f32]) -> Result<FeatureVector> {
    let out = network.forward(&signal_tensor(network, signal)?)?;
    Ok(FeatureVector(out.into_data()))
}

/// Encodes many signals concurrently; output order matches input order.
pub fn encode_batch<S: AsRef<[f32]> + Sync>(network: &Network, signals: &[S]) -> Result<Vec<FeatureVector>> {
    signals.par_iter().map(|s| encode(network, s.as_ref())).collect()
}

/// Category distribution from the head's logits.
pub fn classify(head: &Network, feature: &FeatureVector) -> Result<Vec<f64>> {
    let expected: usize = head.input_shape().iter().product();
    if feature.dim() != expected {
        return Err(Error::Dimension(format!(
            "classifier head expects a {expected}-dimensional feature, got {}",
            feature.dim()
        )));
    }
    let logits = head.forward(&Tensor::from_vec(feature.0.clone()))?;
    let logits: Vec<f64> = logits.data().iter().map(|&v| v as f64).collect();
    Ok(softmax(&logits))
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}
