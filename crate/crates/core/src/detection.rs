//! Wheel-level decisions from per-measurement scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prep;

pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_HEALTH_THRESHOLD: f64 = 0.88;
pub const DEFAULT_DYN_COEFF_THRESHOLD: f64 = 1.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HealthPoint {
    pub timestamp: u64,
    pub value: f64,
}

/// Time-ordered scores of one wheel under one detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthSeries {
    pub wheel_id: u32,
    pub detector: String,
    pub points: Vec<HealthPoint>,
}

impl HealthSeries {
    pub fn new(wheel_id: u32, detector: impl Into<String>, points: Vec<HealthPoint>) -> Self {
        Self {
            wheel_id,
            detector: detector.into(),
            points,
        }
    }

    pub fn is_sorted(&self) -> bool {
        self.points.windows(2).all(|w| w[0].timestamp <= w[1].timestamp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub wheel_id: u32,
    pub detector: String,
    pub flagged: bool,
    /// Timestamp of the measurement completing the first window above threshold.
    pub detection_timestamp: Option<u64>,
}

impl DetectionResult {
    pub fn not_flagged(wheel_id: u32, detector: impl Into<String>) -> Self {
        Self {
            wheel_id,
            detector: detector.into(),
            flagged: false,
            detection_timestamp: None,
        }
    }

    pub fn flagged_at(wheel_id: u32, detector: impl Into<String>, timestamp: u64) -> Self {
        Self {
            wheel_id,
            detector: detector.into(),
            flagged: true,
            detection_timestamp: Some(timestamp),
        }
    }
}

/// Peak-to-static load ratio `max(x) / mean(x)`.
pub fn dyn_coeff(signal: &[f32]) -> Result<f64> {
    if signal.is_empty() {
        return Err(Error::Data("dynCoeff of an empty signal".into()));
    }
    let m = prep::mean(signal);
    if !(m > 0.0) {
        return Err(Error::Data(format!("dynCoeff needs a positive mean, got {m}")));
    }
    let max = signal.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    Ok(max / m)
}

fn median(window: &[f64]) -> f64 {
    let mut v = window.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Flags the wheel at the first run of `window` consecutive values whose
/// median exceeds `threshold`.
pub fn detect(series: &HealthSeries, threshold: f64, window: usize) -> Result<DetectionResult> {
    if window == 0 {
        return Err(Error::Config("detection window must be >= 1".into()));
    }
    if !series.is_sorted() {
        return Err(Error::Ordering(format!(
            "health series of wheel {} ({}) is not time-sorted",
            series.wheel_id, series.detector
        )));
    }
    let values: Vec<f64> = series.points.iter().map(|p| p.value).collect();
    let hit = values
        .windows(window)
        .position(|w| median(w) > threshold)
        .map(|start| series.points[start + window - 1].timestamp);
    Ok(match hit {
        Some(ts) => DetectionResult::flagged_at(series.wheel_id, &series.detector, ts),
        None => DetectionResult::not_flagged(series.wheel_id, &series.detector),
    })
}

/// A wheel is defective if any member flags it; the earliest member wins.
pub fn ensemble_or(members: &[DetectionResult], name: &str) -> Result<DetectionResult> {
    let first = members
        .first()
        .ok_or_else(|| Error::Config("ensemble needs at least one member".into()))?;
    if let Some(other) = members.iter().find(|m| m.wheel_id != first.wheel_id) {
        return Err(Error::Data(format!(
            "ensemble members disagree on wheel id ({} vs {})",
            first.wheel_id, other.wheel_id
        )));
    }
    let earliest = members.iter().filter_map(|m| m.detection_timestamp).min();
    Ok(match earliest {
        Some(ts) => DetectionResult::flagged_at(first.wheel_id, name, ts),
        None => DetectionResult::not_flagged(first.wheel_id, name),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: &[f64]) -> HealthSeries {
        HealthSeries::new(
            3,
            "test",
            values
                .iter()
                .enumerate()
                .map(|(i, &value)| HealthPoint {
                    timestamp: 100 + i as u64,
                    value,
                })
                .collect(),
        )
    }

    #[test]
    fn dyn_coeff_examples() {
        assert_eq!(dyn_coeff(&[4.0; 16]).unwrap(), 1.0);
        assert_eq!(dyn_coeff(&[1.0, 1.0, 1.0, 9.0]).unwrap(), 3.0);
        assert!(dyn_coeff(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn dyn_coeff_of_normalised_signal_is_its_max() {
        let x: Vec<f32> = (0..1024).map(|i| 60.0 + 9.0 * ((i as f32) * 0.05).sin().powi(8)).collect();
        let y = prep::normalize_load(&x).unwrap();
        let max = y.iter().copied().fold(f32::MIN, f32::max) as f64;
        assert!((dyn_coeff(&y).unwrap() - max).abs() < 1e-6);
        assert!((dyn_coeff(&y).unwrap() - dyn_coeff(&x).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn single_spike_is_ignored() {
        let r = detect(&series(&[0.0, 0.0, 2.0, 0.0, 0.0]), 1.0, 5).unwrap();
        assert!(!r.flagged);
        assert_eq!(r.detection_timestamp, None);
    }

    #[test]
    fn constant_exceedance_fires_at_fifth_element() {
        let r = detect(&series(&[2.0; 5]), 1.0, 5).unwrap();
        assert_eq!(r.detection_timestamp, Some(104));
    }

    #[test]
    fn first_qualifying_window() {
        // Windows by hand: [0,0,2,2,2] has median 2 > 1, so the very first
        // window already qualifies and the detection lands on element 5.
        let r = detect(&series(&[0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 2.0]), 1.0, 5).unwrap();
        assert_eq!(r.detection_timestamp, Some(104));
        // With three leading zeros the first qualifying window is elements 3..7.
        let r = detect(&series(&[0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0]), 1.0, 5).unwrap();
        assert_eq!(r.detection_timestamp, Some(106));
    }

    #[test]
    fn short_series_is_not_flagged() {
        assert!(!detect(&series(&[5.0; 4]), 1.0, 5).unwrap().flagged);
    }

    #[test]
    fn unsorted_series_is_rejected() {
        let mut s = series(&[1.0, 2.0, 3.0]);
        s.points.swap(0, 2);
        assert!(matches!(detect(&s, 0.5, 5), Err(Error::Ordering(_))));
    }

    #[test]
    fn ensemble_examples() {
        let a = DetectionResult::flagged_at(1, "a", 10);
        let b = DetectionResult::not_flagged(1, "b");
        assert_eq!(ensemble_or(&[a.clone(), b.clone()], "e").unwrap().detection_timestamp, Some(10));
        assert!(!ensemble_or(&[b.clone(), b.clone()], "e").unwrap().flagged);
        let c = DetectionResult::flagged_at(1, "c", 5);
        assert_eq!(ensemble_or(&[a, c], "e").unwrap().detection_timestamp, Some(5));
        let other = DetectionResult::not_flagged(2, "x");
        assert!(ensemble_or(&[b, other], "e").is_err());
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_detection(values in prop::collection::vec(0.0f64..3.0, 0..40), t in 0.0f64..3.0, dt in 0.0f64..1.0) {
            let s = series(&values);
            let low = detect(&s, t, 5).unwrap();
            let high = detect(&s, t + dt, 5).unwrap();
            prop_assert!(!high.flagged || low.flagged);
            if let (Some(a), Some(b)) = (low.detection_timestamp, high.detection_timestamp) {
                prop_assert!(a <= b);
            }
        }

        #[test]
        fn permuting_within_window_changes_nothing(values in prop::collection::vec(0.0f64..3.0, 5), t in 0.0f64..3.0, perm in Just([4usize, 2, 0, 3, 1])) {
            let a = detect(&series(&values), t, 5).unwrap();
            let permuted: Vec<f64> = perm.iter().map(|&i| values[i]).collect();
            let b = detect(&series(&permuted), t, 5).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
