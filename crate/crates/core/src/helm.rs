//! Hierarchical extreme learning machine baseline.
//!
//! Each autoencoder layer draws fixed random input weights, solves its output
//! weights by L1-regularised least squares (ISTA), and passes on
//! `leaky(input * beta^T)`. A final random expansion feeds a ridge regression
//! onto the constant target 1; the health index is the calibrated distance of
//! the output from 1.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::occ::{percentile, HealthIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HelmConfig {
    pub layers: usize,
    pub units: usize,
    pub occ_units: usize,
    /// L1 weight of the autoencoder layers.
    pub lambda: f64,
    /// Ridge constant of the one-class layer.
    pub ridge_c: f64,
    pub activation_slope: f64,
    pub max_iterations: usize,
    /// Relative objective change that stops ISTA.
    pub tolerance: f64,
}

impl Default for HelmConfig {
    fn default() -> Self {
        Self {
            layers: 5,
            units: 30,
            occ_units: 100,
            lambda: 1e-3,
            ridge_c: 1e-5,
            activation_slope: 0.1,
            max_iterations: 500,
            tolerance: 1e-6,
        }
    }
}

impl HelmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.units == 0 || self.occ_units == 0 {
            return Err(Error::Config("HELM layer counts must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.ridge_c >= 0.0 && self.tolerance > 0.0) {
            return Err(Error::Config("HELM lambda and C must be >= 0, tolerance > 0".into()));
        }
        if !(self.activation_slope > 0.0 && self.activation_slope < 1.0) {
            return Err(Error::Config(format!(
                "activation slope must lie in (0, 1), got {}",
                self.activation_slope
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IstaResult {
    pub beta: DMatrix<f64>,
    /// Objective before the first step and after every step.
    pub objectives: Vec<f64>,
    pub converged: bool,
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// Minimises `1/2 |H b - X|_F^2 + lambda |b|_1` by iterative soft
/// thresholding with step `1 / |H^T H|_2`, starting from zero.
pub fn ista_l1_solve(h: &DMatrix<f64>, x: &DMatrix<f64>, lambda: f64, max_iterations: usize, tolerance: f64) -> Result<IstaResult> {
    if h.nrows() != x.nrows() {
        return Err(Error::Dimension(format!(
            "H has {} rows but X has {}",
            h.nrows(),
            x.nrows()
        )));
    }
    if h.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("ISTA inputs contain non-finite values".into()));
    }
    let hth = h.transpose() * h;
    let htx = h.transpose() * x;
    ista_from_gram(&hth, &htx, x.norm_squared(), lambda, max_iterations, tolerance)
}

fn ista_from_gram(
    hth: &DMatrix<f64>,
    htx: &DMatrix<f64>,
    x_norm2: f64,
    lambda: f64,
    max_iterations: usize,
    tolerance: f64,
) -> Result<IstaResult> {
    let lipschitz = hth.clone().symmetric_eigenvalues().max();
    let mut beta = DMatrix::<f64>::zeros(htx.nrows(), htx.ncols());
    let objective = |b: &DMatrix<f64>, q: &DMatrix<f64>| {
        0.5 * b.dot(q) - b.dot(htx) + 0.5 * x_norm2 + lambda * b.iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut q = hth * &beta;
    let mut objectives = vec![objective(&beta, &q)];
    if !(lipschitz > 0.0) {
        return Ok(IstaResult {
            beta,
            objectives,
            converged: true,
        });
    }
    let step = 1.0 / lipschitz;
    let mut converged = false;
    for _ in 0..max_iterations {
        let grad = &q - htx;
        beta.zip_apply(&grad, |b, g| *b = soft_threshold(*b - step * g, step * lambda));
        q = hth * &beta;
        let f = objective(&beta, &q);
        if !f.is_finite() {
            return Err(Error::Numeric("ISTA objective became non-finite".into()));
        }
        let prev = *objectives.last().unwrap();
        objectives.push(f);
        if (prev - f).abs() <= tolerance * prev.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
    }
    Ok(IstaResult {
        beta,
        objectives,
        converged,
    })
}

/// `(H^T H + C I)^{-1} H^T 1`.
pub fn ridge_one_class(h: &DMatrix<f64>, c: f64) -> Result<DVector<f64>> {
    let mut a = h.transpose() * h;
    for i in 0..a.nrows() {
        a[(i, i)] += c;
    }
    let rhs = h.transpose() * DVector::from_element(h.nrows(), 1.0);
    match a.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&rhs)),
        None => a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numeric("ridge system is singular".into())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HelmLayer {
    /// Random input weights, `units x (inputs + 1)`, last column is the bias.
    pub random_weights: DMatrix<f64>,
    /// Learned output weights, `units x inputs`.
    pub beta: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HelmModel {
    pub config: HelmConfig,
    pub input_dim: usize,
    pub layers: Vec<HelmLayer>,
    /// `occ_units x (units + 1)`.
    pub occ_weights: DMatrix<f64>,
    pub occ_output: DVector<f64>,
    pub scale: f64,
}

fn leaky(m: &mut DMatrix<f64>, slope: f64) {
    m.apply(|v| {
        if *v <= 0.0 {
            *v *= slope
        }
    });
}

/// Uniform(-1, 1) rows scaled to unit norm.
fn random_weights(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut w = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
    for mut r in w.row_iter_mut() {
        let n = r.norm();
        if n > 0.0 {
            r /= n;
        }
    }
    w
}

/// `leaky([input, 1] * W^T)`.
fn hidden(input: &DMatrix<f64>, weights: &DMatrix<f64>, slope: f64) -> DMatrix<f64> {
    let d = input.ncols();
    let mut h = input * weights.columns(0, d).transpose();
    let bias = weights.column(d);
    for mut row in h.row_iter_mut() {
        row += bias.transpose();
    }
    leaky(&mut h, slope);
    h
}

fn signal_matrix<S: AsRef<[f32]>>(signals: &[S], dim: usize) -> Result<DMatrix<f64>> {
    if let Some(s) = signals.iter().find(|s| s.as_ref().len() != dim) {
        return Err(Error::Dimension(format!(
            "HELM expects signals of length {dim}, got {}",
            s.as_ref().len()
        )));
    }
    Ok(DMatrix::from_fn(signals.len(), dim, |i, j| signals[i].as_ref()[j] as f64))
}

pub fn fit_helm<S: AsRef<[f32]>>(signals: &[S], config: &HelmConfig, seed: u64) -> Result<HelmModel> {
    fit_helm_logged(signals, config, seed).map(|(model, _)| model)
}

/// [`fit_helm`] that also returns the ISTA objective trace of every layer.
pub fn fit_helm_logged<S: AsRef<[f32]>>(signals: &[S], config: &HelmConfig, seed: u64) -> Result<(HelmModel, Vec<Vec<f64>>)> {
    config.validate()?;
    let first = signals
        .first()
        .ok_or_else(|| Error::Data("HELM needs a non-empty training set".into()))?;
    let input_dim = first.as_ref().len();
    let mut z = signal_matrix(signals, input_dim)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("HELM training signals contain non-finite values".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope = config.activation_slope;
    let mut layers = Vec::with_capacity(config.layers);
    let mut traces = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let w = random_weights(config.units, z.ncols() + 1, &mut rng);
        let h = hidden(&z, &w, slope);
        let ista = ista_l1_solve(&h, &z, config.lambda, config.max_iterations, config.tolerance)?;
        log::debug!(
            "HELM layer {l}: {} ISTA steps, objective {:.6e}",
            ista.objectives.len() - 1,
            ista.objectives.last().unwrap()
        );
        let mut next = &z * ista.beta.transpose();
        leaky(&mut next, slope);
        layers.push(HelmLayer {
            random_weights: w,
            beta: ista.beta,
        });
        traces.push(ista.objectives);
        z = next;
    }
    let occ_weights = random_weights(config.occ_units, z.ncols() + 1, &mut rng);
    let h = hidden(&z, &occ_weights, slope);
    let occ_output = ridge_one_class(&h, config.ridge_c)?;
    let out = &h * &occ_output;
    let dev: Vec<f64> = out.iter().map(|o| (1.0 - o).abs()).collect();
    let s = percentile(&dev, 0.99);
    let model = HelmModel {
        config: config.clone(),
        input_dim,
        layers,
        occ_weights,
        occ_output,
        scale: if s > 0.0 { s } else { 1.0 },
    };
    Ok((model, traces))
}

impl HelmModel {
    /// One-class layer output for each signal.
    pub fn output<S: AsRef<[f32]>>(&self, signals: &[S]) -> Result<Vec<f64>> {
        let mut z = signal_matrix(signals, self.input_dim)?;
        let slope = self.config.activation_slope;
        for layer in &self.layers {
            z = &z * layer.beta.transpose();
            leaky(&mut z, slope);
        }
        let out = hidden(&z, &self.occ_weights, slope) * &self.occ_output;
        Ok(out.iter().copied().collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        let c = &self.config;
        for v in [c.layers, c.units, c.occ_units, c.max_iterations, self.input_dim] {
            w.u64(v as u64);
        }
        for v in [c.lambda, c.ridge_c, c.activation_slope, c.tolerance, self.scale] {
            w.f64(v);
        }
        let matrix = |w: &mut ByteWriter, m: &DMatrix<f64>| {
            w.u64(m.nrows() as u64);
            w.u64(m.ncols() as u64);
            m.iter().for_each(|&v| w.f64(v));
        };
        for layer in &self.layers {
            matrix(&mut w, &layer.random_weights);
            matrix(&mut w, &layer.beta);
        }
        matrix(&mut w, &self.occ_weights);
        w.f64_slice(self.occ_output.as_slice());
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let mut ints = [0usize; 5];
        for v in ints.iter_mut() {
            *v = r.u64()? as usize;
        }
        let [layers, units, occ_units, max_iterations, input_dim] = ints;
        let (lambda, ridge_c, activation_slope, tolerance, scale) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let config = HelmConfig {
            layers,
            units,
            occ_units,
            lambda,
            ridge_c,
            activation_slope,
            max_iterations,
            tolerance,
        };
        config.validate().map_err(|e| Error::Format(format!("invalid HELM section: {e}")))?;
        let matrix = |r: &mut ByteReader| -> Result<DMatrix<f64>> {
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            if rows.saturating_mul(cols).saturating_mul(8) > bytes.len() {
                return Err(Error::Format(format!("HELM matrix {rows}x{cols} exceeds the section")));
            }
            let data = (0..rows * cols).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            Ok(DMatrix::from_vec(rows, cols, data))
        };
        let layers = (0..layers)
            .map(|_| {
                Ok(HelmLayer {
                    random_weights: matrix(&mut r)?,
                    beta: matrix(&mut r)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let occ_weights = matrix(&mut r)?;
        let occ_output = DVector::from_vec(r.f64_vec()?);
        r.finish()?;
        Ok(Self {
            config,
            input_dim,
            layers,
            occ_weights,
            occ_output,
            scale,
        })
    }
}

/// `|1 - output| / s` per signal.
pub fn helm_health<S: AsRef<[f32]>>(model: &HelmModel, signals: &[S], timestamps: &[u64]) -> Result<Vec<HealthIndex>> {
    if signals.len() != timestamps.len() {
        return Err(Error::Dimension(format!(
            "{} signals but {} timestamps",
            signals.len(),
            timestamps.len()
        )));
    }
    Ok(model
        .output(signals)?
        .into_iter()
        .zip(timestamps)
        .map(|(o, &timestamp)| HealthIndex {
            timestamp,
            value: (1.0 - o).abs() / model.scale,
        })
        .collect())
}
