//! Central finite-difference check of the analytic backward pass.
//!
//! The network is lifted to `f64` and reduced to the scalar objective
//! `sum_i w_i * y_i` with a fixed random projection `w`. Perturbations that
//! move any rectifier input across zero are skipped: the objective is not
//! differentiable there and the difference quotient is meaningless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layer::LayerSpec;
use super::network::{Gradients, Network, Trace};
use super::tensor::{Scalar, Tensor};
use crate::error::Result;

/// Error below which the difference is considered noise regardless of scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub h: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    /// Names of tensors whose analytic gradient disagrees with the difference quotient.
    pub fn flagged(&self) -> Vec<&str> {
        self.tensors
            .iter()
            .filter(|t| !t.passed)
            .map(|t| t.name.as_str())
            .collect()
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Checks `Network::backward` against central differences with step `h`.
pub fn grad_check<T: Scalar>(network: &Network<T>, input: &Tensor<T>, h: f64, tolerance: f64) -> Result<GradCheckReport> {
    grad_check_with(network, input, h, tolerance, |net, trace, upstream| {
        net.backward(trace, upstream)
    })
}

/// Same as [`grad_check`] but with a caller-supplied backward rule.
pub fn grad_check_with<T, F>(
    network: &Network<T>,
    input: &Tensor<T>,
    h: f64,
    tolerance: f64,
    backward: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&Network<f64>, &Trace<f64>, &[f64]) -> Result<Gradients<f64>>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut net: Network<f64> = network.cast();
    let x: Tensor<f64> = input.cast();

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_9c4e);
    let projection: Vec<f64> = (0..net.output_len()).map(|_| rng.random_range(-1.0..1.0)).collect();

    let (_, trace) = net.forward_trace(&x)?;
    let base_pattern = kink_pattern(&net, &trace);
    let analytic = backward(&net, &trace, &projection)?;

    let names = net.param_names();
    let mut tensors = Vec::with_capacity(names.len() + 1);

    let param_count = net.params().count();
    for t in 0..param_count {
        let len = net.params().nth(t).unwrap().len();
        let mut check = TensorCheck {
            name: names[t].clone(),
            max_relative_error: 0.0,
            worst_index: 0,
            checked: 0,
            skipped: 0,
            passed: true,
        };
        for i in 0..len {
            let original = net.params().nth(t).unwrap().data()[i];
            let mut eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
                net.params_mut().nth(t).unwrap().data_mut()[i] = original + delta;
                let (y, tr) = net.forward_trace(&x)?;
                Ok((objective(&y, &projection), kink_pattern(&net, &tr)))
            };
            let (plus, plus_pattern) = eval(h)?;
            let (minus, minus_pattern) = eval(-h)?;
            net.params_mut().nth(t).unwrap().data_mut()[i] = original;
            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            record(&mut check, i, analytic.params[t][i], numeric);
        }
        check.passed = check.max_relative_error < tolerance;
        tensors.push(check);
    }

    let mut check = TensorCheck {
        name: "input".into(),
        max_relative_error: 0.0,
        worst_index: 0,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    for i in 0..x.len() {
        let probe = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            let (y, tr) = net.forward_trace(&xp)?;
            Ok((objective(&y, &projection), kink_pattern(&net, &tr)))
        };
        let (plus, pp) = probe(h)?;
        let (minus, mp) = probe(-h)?;
        if pp != base_pattern || mp != base_pattern {
            check.skipped += 1;
            continue;
        }
        record(&mut check, i, analytic.input[i], (plus - minus) / (2.0 * h));
    }
    check.passed = check.max_relative_error < tolerance;
    tensors.push(check);

    let max_relative_error = tensors.iter().map(|t| t.max_relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        tensors,
        max_relative_error,
        tolerance,
        h,
    })
}

fn record(check: &mut TensorCheck, index: usize, analytic: f64, numeric: f64) {
    let err = relative_error(analytic, numeric);
    check.checked += 1;
    if err > check.max_relative_error || err.is_nan() {
        check.max_relative_error = if err.is_nan() { f64::INFINITY } else { err };
        check.worst_index = index;
    }
}

fn objective(y: &Tensor<f64>, projection: &[f64]) -> f64 {
    y.data().iter().zip(projection).map(|(a, b)| a * b).sum()
}

/// Sign of every rectifier input in the trace.
fn kink_pattern(net: &Network<f64>, trace: &Trace<f64>) -> Vec<bool> {
    let mut pattern = Vec::new();
    for (i, layer) in net.layers().iter().enumerate() {
        if matches!(layer.spec(), LayerSpec::Relu | LayerSpec::LeakyRelu { .. }) {
            let a = trace.activation(i).expect("trace covers every layer");
            pattern.extend(a.data().iter().map(|&v| v > 0.0));
        }
    }
    pattern
}
