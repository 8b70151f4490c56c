use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Static description of one layer. Convolutions operate on `[channels, length]`
/// inputs; dense layers flatten whatever they receive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Conv1d {
        in_channels: usize,
        filters: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    LeakyRelu {
        slope: f32,
    },
    Relu,
    Softmax,
}

impl LayerSpec {
    /// Convolution with symmetric zero padding of `(kernel_size - 1) / 2`.
    pub fn conv1d(in_channels: usize, filters: usize, kernel_size: usize, stride: usize) -> Self {
        LayerSpec::Conv1d {
            in_channels,
            filters,
            kernel_size,
            stride,
            padding: (kernel_size - 1) / 2,
        }
    }

    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        LayerSpec::Dense { in_dim, out_dim }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::LeakyRelu { .. } => "leaky-relu",
            LayerSpec::Relu => "relu",
            LayerSpec::Softmax => "softmax",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                filters,
                kernel_size,
                stride,
                ..
            } => {
                if in_channels == 0 || filters == 0 || kernel_size == 0 || stride == 0 {
                    return Err(Error::Config(format!(
                        "conv1d dimensions must be >= 1 (channels {in_channels}, filters {filters}, kernel {kernel_size}, stride {stride})"
                    )));
                }
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(Error::Config(format!(
                        "dense dimensions must be >= 1 (in {in_dim}, out {out_dim})"
                    )));
                }
            }
            LayerSpec::LeakyRelu { slope } => {
                if !(slope > 0.0 && slope < 1.0) {
                    return Err(Error::Config(format!(
                        "leaky-relu slope must lie in (0, 1), got {slope}"
                    )));
                }
            }
            LayerSpec::Relu | LayerSpec::Softmax => {}
        }
        Ok(())
    }

    /// Output length of a convolution over an input of length `len`.
    pub fn conv_output_len(len: usize, kernel_size: usize, stride: usize, padding: usize) -> Option<usize> {
        let padded = len + 2 * padding;
        if padded < kernel_size || stride == 0 {
            None
        } else {
            Some((padded - kernel_size) / stride + 1)
        }
    }

    /// Shape produced from `input`, or a dimension error naming layer `index`.
    pub fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>> {
        let numel: usize = input.iter().product();
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                filters,
                kernel_size,
                stride,
                padding,
            } => {
                if input.len() != 2 || input[0] != in_channels {
                    return Err(Error::Dimension(format!(
                        "layer {index} (conv1d): expected input [{in_channels}, L], got {input:?}"
                    )));
                }
                let out = Self::conv_output_len(input[1], kernel_size, stride, padding).ok_or_else(|| {
                    Error::Dimension(format!(
                        "layer {index} (conv1d): input length {} too short for kernel {kernel_size}",
                        input[1]
                    ))
                })?;
                Ok(vec![filters, out])
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                if numel != in_dim {
                    return Err(Error::Dimension(format!(
                        "layer {index} (dense): expected {in_dim} inputs, got {numel} (shape {input:?})"
                    )));
                }
                Ok(vec![out_dim])
            }
            LayerSpec::LeakyRelu { .. } | LayerSpec::Relu | LayerSpec::Softmax => Ok(input.to_vec()),
        }
    }

    /// Shapes of the trainable tensors, in declaration order (weight, bias).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                filters,
                kernel_size,
                ..
            } => vec![vec![filters, in_channels, kernel_size], vec![filters]],
            LayerSpec::Dense { in_dim, out_dim } => vec![vec![out_dim, in_dim], vec![out_dim]],
            _ => Vec::new(),
        }
    }

    fn fans(&self) -> (usize, usize) {
        match *self {
            LayerSpec::Conv1d {
                in_channels,
                filters,
                kernel_size,
                ..
            } => (in_channels * kernel_size, filters * kernel_size),
            LayerSpec::Dense { in_dim, out_dim } => (in_dim, out_dim),
            _ => (1, 1),
        }
    }
}

/// A layer with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    spec: LayerSpec,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Layer<T> {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let (fan_in, fan_out) = spec.fans();
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let params = spec
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                let data = if i == 0 {
                    (0..n)
                        .map(|_| T::from_f64(rng.random_range(-limit..limit)))
                        .collect()
                } else {
                    vec![T::zero(); n]
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec, params })
    }

    pub fn from_parts(spec: LayerSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len()
            || shapes.iter().zip(&params).any(|(s, p)| s.as_slice() != p.shape())
        {
            return Err(Error::Dimension(format!(
                "{} layer expects parameters of shapes {shapes:?}",
                spec.kind_name()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub(crate) fn cast<U: Scalar>(&self) -> Layer<U> {
        Layer {
            spec: self.spec,
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Forward pass; `input` must already have been shape-checked.
    pub(crate) fn forward(&self, input: &Tensor<T>, out_shape: Vec<usize>) -> Tensor<T> {
        let x = input.data();
        let data = match self.spec {
            LayerSpec::Conv1d {
                in_channels,
                filters,
                kernel_size,
                stride,
                padding,
            } => conv1d_forward(
                x,
                self.params[0].data(),
                self.params[1].data(),
                in_channels,
                input.shape()[1],
                filters,
                kernel_size,
                stride,
                padding,
                out_shape[1],
            ),
            LayerSpec::Dense { in_dim, out_dim } => {
                let w = self.params[0].data();
                let b = self.params[1].data();
                (0..out_dim)
                    .map(|o| {
                        let row = &w[o * in_dim..(o + 1) * in_dim];
                        b[o] + dot(row, x)
                    })
                    .collect()
            }
            LayerSpec::LeakyRelu { slope } => {
                let s = T::from_f64(slope as f64);
                x.iter().map(|&v| if v > T::zero() { v } else { s * v }).collect()
            }
            LayerSpec::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            LayerSpec::Softmax => softmax(x),
        };
        Tensor::new(out_shape, data).expect("layer output shape is consistent")
    }

    /// Vector-Jacobian product: given the layer input, its output, and the
    /// upstream gradient, returns (parameter gradients, input gradient).
    pub(crate) fn backward(&self, input: &Tensor<T>, output: &Tensor<T>, upstream: &[T]) -> (Vec<Vec<T>>, Vec<T>) {
        let x = input.data();
        match self.spec {
            LayerSpec::Conv1d {
                in_channels,
                filters,
                kernel_size,
                stride,
                padding,
            } => {
                let len = input.shape()[1];
                let out_len = output.shape()[1];
                let w = self.params[0].data();
                let mut dw = vec![T::zero(); w.len()];
                let mut db = vec![T::zero(); filters];
                let mut dx = vec![T::zero(); x.len()];
                for f in 0..filters {
                    let g_row = &upstream[f * out_len..(f + 1) * out_len];
                    db[f] = g_row.iter().copied().sum();
                    for c in 0..in_channels {
                        let base = (f * in_channels + c) * kernel_size;
                        let w_k = &w[base..base + kernel_size];
                        let dw_k = &mut dw[base..base + kernel_size];
                        let x_row = &x[c * len..(c + 1) * len];
                        let dx_row = &mut dx[c * len..(c + 1) * len];
                        for (o, &g) in g_row.iter().enumerate() {
                            if g == T::zero() {
                                continue;
                            }
                            let start = (o * stride) as isize - padding as isize;
                            if start >= 0 && start as usize + kernel_size <= len {
                                let s = start as usize;
                                let xs = &x_row[s..s + kernel_size];
                                let dxs = &mut dx_row[s..s + kernel_size];
                                for ((dwv, dxv), (&xv, &wv)) in dw_k.iter_mut().zip(dxs.iter_mut()).zip(xs.iter().zip(w_k)) {
                                    *dwv += g * xv;
                                    *dxv += g * wv;
                                }
                                continue;
                            }
                            let k_lo = (-start).max(0) as usize;
                            let k_hi = ((len as isize - start).min(kernel_size as isize)).max(0) as usize;
                            for k in k_lo..k_hi {
                                let idx = (start + k as isize) as usize;
                                dw_k[k] += g * x_row[idx];
                                dx_row[idx] += g * w_k[k];
                            }
                        }
                    }
                }
                (vec![dw, db], dx)
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                let w = self.params[0].data();
                let mut dw = vec![T::zero(); w.len()];
                let mut dx = vec![T::zero(); in_dim];
                for o in 0..out_dim {
                    let g = upstream[o];
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    let drow = &mut dw[o * in_dim..(o + 1) * in_dim];
                    for i in 0..in_dim {
                        drow[i] = g * x[i];
                        dx[i] += g * row[i];
                    }
                }
                (vec![dw, upstream.to_vec()], dx)
            }
            LayerSpec::LeakyRelu { slope } => {
                let s = T::from_f64(slope as f64);
                let dx = x
                    .iter()
                    .zip(upstream)
                    .map(|(&v, &g)| if v > T::zero() { g } else { s * g })
                    .collect();
                (Vec::new(), dx)
            }
            LayerSpec::Relu => {
                let dx = x
                    .iter()
                    .zip(upstream)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                (Vec::new(), dx)
            }
            LayerSpec::Softmax => {
                let y = output.data();
                let inner: T = y.iter().zip(upstream).map(|(&a, &b)| a * b).sum();
                let dx = y.iter().zip(upstream).map(|(&p, &g)| p * (g - inner)).collect();
                (Vec::new(), dx)
            }
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[allow(clippy::too_many_arguments)]
fn conv1d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    in_channels: usize,
    len: usize,
    filters: usize,
    kernel_size: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
) -> Vec<T> {
    let mut y = vec![T::zero(); filters * out_len];
    for f in 0..filters {
        let y_row = &mut y[f * out_len..(f + 1) * out_len];
        y_row.iter_mut().for_each(|v| *v = b[f]);
        for c in 0..in_channels {
            let base = (f * in_channels + c) * kernel_size;
            let w_k = &w[base..base + kernel_size];
            let x_row = &x[c * len..(c + 1) * len];
            for (o, out) in y_row.iter_mut().enumerate() {
                let start = (o * stride) as isize - padding as isize;
                if start >= 0 && start as usize + kernel_size <= len {
                    let s = start as usize;
                    *out += dot(w_k, &x_row[s..s + kernel_size]);
                } else {
                    let k_lo = (-start).max(0) as usize;
                    let k_hi = ((len as isize - start).min(kernel_size as isize)).max(0) as usize;
                    for k in k_lo..k_hi {
                        *out += w_k[k] * x_row[(start + k as isize) as usize];
                    }
                }
            }
        }
    }
    y
}

/// Numerically stable softmax via log-sum-exp.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&v| (v - lse).exp()).collect()
}

pub fn log_sum_exp<T: Scalar>(logits: &[T]) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let sum: T = logits.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Fused softmax + cross-entropy: returns the loss and its gradient with
/// respect to the logits (`p - onehot`).
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<(T, Vec<T>)> {
    if label >= logits.len() {
        return Err(Error::Data(format!(
            "label {label} outside {} categories",
            logits.len()
        )));
    }
    let lse = log_sum_exp(logits);
    let loss = lse - logits[label];
    let mut grad: Vec<T> = logits.iter().map(|&v| (v - lse).exp()).collect();
    grad[label] -= T::one();
    Ok((loss, grad))
}
