//! One-class SVM (nu formulation, RBF kernel) fitted by SMO.
//!
//! The dual is `min 1/2 a^T K a` subject to `0 <= a_i <= 1/(nu n)` and
//! `sum a_i = 1`; the decision function is `g(x) = sum a_i k(x_i, x) - rho`,
//! positive inside the healthy region.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

pub const DEFAULT_NU: f64 = 0.05;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_MAX_ITERATIONS: usize = 1_000_000;
/// Points used for the median heuristic.
pub const MEDIAN_HEURISTIC_SAMPLE: usize = 1000;
const CALIBRATION_QUANTILE: f64 = 0.99;
const TAU: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Gamma {
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcSvmConfig {
    pub nu: f64,
    pub gamma: Gamma,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for OcSvmConfig {
    fn default() -> Self {
        Self {
            nu: DEFAULT_NU,
            gamma: Gamma::MedianHeuristic,
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcSvmModel {
    pub support_vectors: Vec<Vec<f64>>,
    pub alphas: Vec<f64>,
    pub rho: f64,
    pub gamma: f64,
    /// Calibration scale of the health index.
    pub scale: f64,
    pub nu: f64,
    /// Set when every training point coincides; the boundary has zero width.
    pub degenerate: bool,
    pub iterations: usize,
    pub max_violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthIndex {
    pub timestamp: u64,
    pub value: f64,
}

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// Linear interpolation between closest ranks.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// `1 / median(|x_i - x_j|^2)` over pairs of a strided subsample; `None` if
/// the median is zero.
pub fn median_heuristic_gamma(features: &[Vec<f64>]) -> Option<f64> {
    let stride = features.len().div_ceil(MEDIAN_HEURISTIC_SAMPLE).max(1);
    let sample: Vec<&Vec<f64>> = features.iter().step_by(stride).collect();
    let mut d2 = Vec::with_capacity(sample.len() * sample.len() / 2);
    for i in 0..sample.len() {
        for j in i + 1..sample.len() {
            d2.push(sample[i].iter().zip(sample[j]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>());
        }
    }
    if d2.is_empty() {
        return None;
    }
    let m = percentile(&d2, 0.5);
    (m > 0.0).then(|| 1.0 / m)
}

fn validate_features(features: &[Vec<f64>]) -> Result<usize> {
    if features.len() < 2 {
        return Err(Error::Data(format!("one-class SVM needs >= 2 features, got {}", features.len())));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Dimension("features must share a non-zero dimension".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("features contain non-finite values".into()));
    }
    Ok(d)
}

pub fn fit_ocsvm(features: &[Vec<f64>], config: &OcSvmConfig) -> Result<OcSvmModel> {
    let _ = validate_features(features)?;
    let nu = config.nu;
    if !(nu > 0.0 && nu <= 1.0) {
        return Err(Error::Config(format!("nu must lie in (0, 1], got {nu}")));
    }
    if !(config.tolerance > 0.0) {
        return Err(Error::Config("solver tolerance must be positive".into()));
    }
    let n = features.len();
    if features.iter().all(|f| f == &features[0]) {
        return Ok(OcSvmModel {
            support_vectors: vec![features[0].clone()],
            alphas: vec![1.0],
            rho: 1.0,
            gamma: 1.0,
            scale: 1.0,
            nu,
            degenerate: true,
            iterations: 0,
            max_violation: 0.0,
        });
    }
    let gamma = match config.gamma {
        Gamma::Fixed(g) if g > 0.0 && g.is_finite() => g,
        Gamma::Fixed(g) => return Err(Error::Config(format!("gamma must be positive, got {g}"))),
        Gamma::MedianHeuristic => median_heuristic_gamma(features).unwrap_or(1.0),
    };
    let c = 1.0 / (nu * n as f64);
    let row = |i: usize| -> Vec<f64> { features.iter().map(|f| rbf(&features[i], f, gamma)).collect() };

    // Feasible start: the first floor(nu n) points at the bound, the rest of
    // the mass on the next point.
    let mut alpha = vec![0.0; n];
    let mut remaining = 1.0;
    for a in alpha.iter_mut() {
        if remaining <= 0.0 {
            break;
        }
        *a = c.min(remaining);
        remaining -= *a;
    }
    let mut grad = vec![0.0; n];
    for (i, &a) in alpha.iter().enumerate() {
        if a > 0.0 {
            for (g, k) in grad.iter_mut().zip(row(i)) {
                *g += a * k;
            }
        }
    }

    let mut iterations = 0;
    let mut max_violation;
    loop {
        // i: steepest feasible increase; j: second-order choice among decreases.
        let mut i = usize::MAX;
        let mut g_min = f64::INFINITY;
        let mut g_max = f64::NEG_INFINITY;
        for t in 0..n {
            if alpha[t] < c && grad[t] < g_min {
                g_min = grad[t];
                i = t;
            }
            if alpha[t] > 0.0 && grad[t] > g_max {
                g_max = grad[t];
            }
        }
        max_violation = g_max - g_min;
        if i == usize::MAX || max_violation < config.tolerance || iterations >= config.max_iterations {
            break;
        }
        let k_i = row(i);
        let mut j = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for t in 0..n {
            if alpha[t] > 0.0 && grad[t] > g_min {
                let diff = grad[t] - g_min;
                let eta = (k_i[i] + 1.0 - 2.0 * k_i[t]).max(TAU);
                let gain = diff * diff / eta;
                if gain > best {
                    best = gain;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            break;
        }
        let k_j = row(j);
        let eta = (k_i[i] + k_j[j] - 2.0 * k_i[j]).max(TAU);
        let step = ((grad[j] - grad[i]) / eta).min(c - alpha[i]).min(alpha[j]);
        alpha[i] += step;
        alpha[j] -= step;
        if c - alpha[i] < 1e-15 * c {
            alpha[i] = c;
        }
        if alpha[j] < 1e-15 * c {
            alpha[j] = 0.0;
        }
        for t in 0..n {
            grad[t] += step * (k_i[t] - k_j[t]);
        }
        iterations += 1;
    }
    if iterations >= config.max_iterations {
        log::warn!("one-class SVM stopped at {iterations} iterations with violation {max_violation:.3e}");
    }

    let free: Vec<f64> = (0..n).filter(|&t| alpha[t] > 0.0 && alpha[t] < c).map(|t| grad[t]).collect();
    let rho = if free.is_empty() {
        let upper = (0..n).filter(|&t| alpha[t] < c).map(|t| grad[t]).fold(f64::INFINITY, f64::min);
        let lower = (0..n).filter(|&t| alpha[t] > 0.0).map(|t| grad[t]).fold(f64::NEG_INFINITY, f64::max);
        0.5 * (upper + lower)
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };

    let (support_vectors, alphas): (Vec<Vec<f64>>, Vec<f64>) = (0..n)
        .filter(|&t| alpha[t] > 0.0)
        .map(|t| (features[t].clone(), alpha[t]))
        .unzip();
    let mut model = OcSvmModel {
        support_vectors,
        alphas,
        rho,
        gamma,
        scale: 1.0,
        nu,
        degenerate: false,
        iterations,
        max_violation,
    };
    let abs_g: Vec<f64> = grad.iter().map(|g| (g - rho).abs()).collect();
    let s = percentile(&abs_g, CALIBRATION_QUANTILE);
    model.scale = if s > 0.0 { s } else { 1.0 };
    Ok(model)
}

impl OcSvmModel {
    pub fn dim(&self) -> usize {
        self.support_vectors[0].len()
    }

    /// `g(x)`; positive inside the boundary.
    pub fn decision(&self, feature: &[f64]) -> Result<f64> {
        if feature.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "model expects {}-dimensional features, got {}",
                self.dim(),
                feature.len()
            )));
        }
        Ok(self
            .support_vectors
            .iter()
            .zip(&self.alphas)
            .map(|(sv, a)| a * rbf(sv, feature, self.gamma))
            .sum::<f64>()
            - self.rho)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.u32(self.dim() as u32);
        w.u32(self.support_vectors.len() as u32);
        for sv in &self.support_vectors {
            sv.iter().for_each(|&v| w.f64(v));
        }
        self.alphas.iter().for_each(|&a| w.f64(a));
        for v in [self.rho, self.gamma, self.scale, self.nu, self.max_violation] {
            w.f64(v);
        }
        w.u8(self.degenerate as u8);
        w.u64(self.iterations as u64);
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let d = r.u32()? as usize;
        let m = r.u32()? as usize;
        if d == 0 || m == 0 || (m * (d + 1)).saturating_mul(8) > bytes.len() {
            return Err(Error::Format(format!("one-class SVM section declares {m} vectors of dimension {d}")));
        }
        let support_vectors = (0..m)
            .map(|_| (0..d).map(|_| r.f64()).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let alphas = (0..m).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let (rho, gamma, scale, nu, max_violation) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let degenerate = r.u8()? != 0;
        let iterations = r.u64()? as usize;
        r.finish()?;
        Ok(Self {
            support_vectors,
            alphas,
            rho,
            gamma,
            scale,
            nu,
            degenerate,
            iterations,
            max_violation,
        })
    }
}

/// `-g(x) / s`: healthy training data mostly lies below 1.
pub fn health_index(model: &OcSvmModel, feature: &[f64], timestamp: u64) -> Result<HealthIndex> {
    Ok(HealthIndex {
        timestamp,
        value: -model.decision(feature)? / model.scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect()
    }

    #[test]
    fn dual_constraints_hold() {
        let x = cloud(60, 1);
        let m = fit_ocsvm(&x, &OcSvmConfig { nu: 0.2, ..Default::default() }).unwrap();
        let c = 1.0 / (0.2 * 60.0);
        assert!((m.alphas.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        assert!(m.alphas.iter().all(|&a| a > 0.0 && a <= c + 1e-15));
        assert!(m.max_violation < DEFAULT_TOLERANCE);
    }

    #[test]
    fn kernel_matrix_is_psd() {
        let x = cloud(15, 2);
        let gamma = median_heuristic_gamma(&x).unwrap();
        let k = DMatrix::from_fn(15, 15, |i, j| rbf(&x[i], &x[j], gamma));
        assert_eq!(k, k.transpose());
        let min = k.symmetric_eigenvalues().min();
        assert!(min >= -1e-8, "{min}");
    }

    #[test]
    fn identical_points_are_degenerate() {
        let m = fit_ocsvm(&[vec![1.0, 2.0], vec![1.0, 2.0]], &OcSvmConfig::default()).unwrap();
        assert!(m.degenerate);
        assert!(fit_ocsvm(&[vec![1.0]], &OcSvmConfig::default()).is_err());
    }

    #[test]
    fn health_sign_convention() {
        let x = cloud(80, 3);
        let m = fit_ocsvm(&x, &OcSvmConfig { nu: 0.3, ..Default::default() }).unwrap();
        let centre = health_index(&m, &[0.0, 0.0], 0).unwrap().value;
        assert!(centre < 1.0);
        let far = health_index(&m, &[50.0, 50.0], 0).unwrap().value;
        assert!((far - m.rho / m.scale).abs() < 1e-12);
        assert!(far > 0.0);
        assert!(health_index(&m, &[0.0], 0).is_err());
    }

    #[test]
    fn calibration_bounds_training_exceedance() {
        let x = cloud(300, 4);
        let m = fit_ocsvm(&x, &OcSvmConfig::default()).unwrap();
        let above = x.iter().filter(|f| health_index(&m, f, 0).unwrap().value > 1.0).count();
        assert!(above as f64 <= 0.01 * x.len() as f64 + 1.0, "{above}");
    }

    #[test]
    fn health_is_lipschitz_in_the_feature() {
        let x = cloud(50, 5);
        let m = fit_ocsvm(&x, &OcSvmConfig::default()).unwrap();
        // |d k / d x| <= sqrt(2 gamma / e) per unit alpha mass
        let bound = (2.0 * m.gamma / std::f64::consts::E).sqrt() / m.scale;
        let delta = 1e-4;
        for p in &x {
            let a = health_index(&m, p, 0).unwrap().value;
            let b = health_index(&m, &[p[0] + delta, p[1]], 0).unwrap().value;
            assert!((a - b).abs() <= bound * delta * 1.0001);
        }
    }

    #[test]
    fn section_round_trip() {
        let m = fit_ocsvm(&cloud(30, 6), &OcSvmConfig::default()).unwrap();
        let back = OcSvmModel::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert!(OcSvmModel::from_bytes(&m.to_bytes()[..20]).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(percentile(&[0.0, 10.0], 0.99), 9.9);
    }
}
