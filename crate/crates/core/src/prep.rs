//! Raw checkpoint readings to model-ready signals: concatenate the eight
//! sensor segments, resample to a fixed length, divide by the mean load.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SENSOR_COUNT: usize = 8;
pub const SIGNAL_LENGTH: usize = 1024;

/// One wheel pass over one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub wheel_id: u32,
    pub checkpoint_id: u32,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    /// km/h
    pub speed: f32,
    pub load: f32,
    /// Vertical force per strain gauge, in sensor order.
    pub segments: Vec<Vec<f32>>,
}

impl Measurement {
    pub fn validate(&self) -> Result<()> {
        if self.segments.len() != SENSOR_COUNT {
            let first_missing = self.segments.len().min(SENSOR_COUNT);
            return Err(Error::Data(format!(
                "wheel {} at {}: expected {SENSOR_COUNT} sensor segments, got {} (sensor {first_missing} missing or extra)",
                self.wheel_id,
                self.timestamp,
                self.segments.len()
            )));
        }
        for (i, seg) in self.segments.iter().enumerate() {
            if seg.is_empty() {
                return Err(Error::Data(format!(
                    "wheel {} at {}: sensor {i} segment is empty",
                    self.wheel_id, self.timestamp
                )));
            }
            if seg.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "wheel {} at {}: sensor {i} has non-finite samples",
                    self.wheel_id, self.timestamp
                )));
            }
        }
        if !(self.load > 0.0) {
            return Err(Error::Data(format!(
                "wheel {} at {}: load must be positive, got {}",
                self.wheel_id, self.timestamp, self.load
            )));
        }
        Ok(())
    }
}

/// Resampled, load-normalised signal of one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSignal {
    pub wheel_id: u32,
    pub checkpoint_id: u32,
    pub timestamp: u64,
    pub values: Vec<f32>,
}

pub fn concatenate_sensors(measurement: &Measurement) -> Result<Vec<f32>> {
    measurement.validate()?;
    Ok(measurement.segments.iter().flatten().copied().collect())
}

/// Linear interpolation of `signal` at positions `i * (L - 1) / (T - 1)`.
pub fn resample_linear(signal: &[f32], target_len: usize) -> Result<Vec<f32>> {
    if signal.len() < 2 {
        return Err(Error::Data(format!(
            "resampling needs at least 2 samples, got {}",
            signal.len()
        )));
    }
    if target_len < 2 {
        return Err(Error::Config(format!("resample target length must be >= 2, got {target_len}")));
    }
    let last = signal.len() - 1;
    let scale = last as f64 / (target_len - 1) as f64;
    Ok((0..target_len)
        .map(|i| {
            let pos = if i == target_len - 1 { last as f64 } else { i as f64 * scale };
            let j = pos.floor() as usize;
            if j >= last {
                return signal[last];
            }
            let frac = pos - j as f64;
            let a = signal[j] as f64;
            let b = signal[j + 1] as f64;
            (a + frac * (b - a)) as f32
        })
        .collect())
}

/// Mean with double-precision accumulation.
pub fn mean(signal: &[f32]) -> f64 {
    signal.iter().map(|&v| v as f64).sum::<f64>() / signal.len() as f64
}

/// Divides by the mean so the static load becomes 1.
pub fn normalize_load(signal: &[f32]) -> Result<Vec<f32>> {
    if signal.is_empty() {
        return Err(Error::Data("cannot normalise an empty signal".into()));
    }
    let m = mean(signal);
    if !(m > 0.0) || !m.is_finite() {
        return Err(Error::Data(format!(
            "signal mean {m} is not positive; sensor fault suspected"
        )));
    }
    Ok(signal.iter().map(|&v| (v as f64 / m) as f32).collect())
}

/// Zero mean, unit standard deviation. Used for the toy task, whose
/// categories live in small deviations from a constant level.
pub fn standardize(signal: &[f32]) -> Result<Vec<f32>> {
    if signal.is_empty() {
        return Err(Error::Data("cannot standardise an empty signal".into()));
    }
    let m = mean(signal);
    let var = signal.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / signal.len() as f64;
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::Data(format!("signal spread {sd} cannot be standardised")));
    }
    Ok(signal.iter().map(|&v| ((v as f64 - m) / sd) as f32).collect())
}

/// concatenate -> resample -> normalise.
pub fn prepare(measurement: &Measurement, target_len: usize) -> Result<PreparedSignal> {
    let raw = concatenate_sensors(measurement)?;
    let resampled = resample_linear(&raw, target_len)?;
    let values = normalize_load(&resampled)?;
    Ok(PreparedSignal {
        wheel_id: measurement.wheel_id,
        checkpoint_id: measurement.checkpoint_id,
        timestamp: measurement.timestamp,
        values,
    })
}
