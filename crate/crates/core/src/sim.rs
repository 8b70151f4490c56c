//! Seeded synthetic wheel fleet with ground-truth fault zones, and a small
//! three-category dataset for the supervised task.
//!
//! One measurement is one wheel revolution split over eight strain gauges.
//! The force at wheel angle `u` (in revolutions) is
//! `load * gain[checkpoint][sensor] * (1 + harmonics(u) + fault(u)) + noise`,
//! where the harmonic amplitudes grow with days since the last workshop visit.

use std::f64::consts::TAU;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::SECONDS_PER_DAY;
use crate::error::{Error, Result};
use crate::prep::{Measurement, SENSOR_COUNT};

/// 2020-01-01T00:00:00Z
pub const DEFAULT_BASE_TIMESTAMP: u64 = 1_577_836_800;

const SHELLING_AMPLITUDE: f64 = 0.5;
const SHELLING_SIGMA: f64 = 0.05 / 2.354_820_045;
const SHELLING_OFFSETS: [f64; 3] = [0.0, 0.07, 0.14];
const SHELLING_WEIGHTS: [f64; 3] = [1.0, 0.8, 0.6];
/// 40 % of the shelling peak, the largest a crack may reach.
const CRACK_AMPLITUDE: f64 = 0.2;
const CRACK_SIGMA: f64 = 0.015;
const FLAT_AMPLITUDE: f64 = 1.5;
const FLAT_SIGMA: f64 = 0.002;
const FLAT_RING_AMPLITUDE: f64 = 0.3;
const FLAT_RING_DECAY: f64 = 0.01;
const FLAT_RING_PERIOD: f64 = 0.006;
/// Per-pass multiplicative jitter of the fault amplitude.
const FAULT_JITTER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    Shelling,
    Crack,
    Flat,
}

impl FaultKind {
    pub const ALL: [FaultKind; 3] = [FaultKind::Shelling, FaultKind::Crack, FaultKind::Flat];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::Shelling => "shelling",
            FaultKind::Crack => "crack",
            FaultKind::Flat => "flat",
        }
    }
}

impl FromStr for FaultKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FaultKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fault kind {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultAssignment {
    pub wheel_id: u32,
    pub kind: FaultKind,
    pub onset_day: u32,
    pub manifest_day: u32,
}

/// Days counted from the fleet's base timestamp. Green before `onset_day`,
/// orange on `[onset_day, manifest_day]`, red after `manifest_day` until
/// `monitoring_end_day`. Red delays are measured from `manifest_day`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZoneAnnotation {
    pub onset_day: u32,
    pub manifest_day: u32,
    pub monitoring_end_day: u32,
}

impl ZoneAnnotation {
    pub fn new(onset_day: u32, manifest_day: u32, monitoring_end_day: u32) -> Result<Self> {
        if !(onset_day <= manifest_day && manifest_day <= monitoring_end_day) {
            return Err(Error::Config(format!(
                "zone days must be ordered: onset {onset_day}, manifest {manifest_day}, end {monitoring_end_day}"
            )));
        }
        Ok(Self {
            onset_day,
            manifest_day,
            monitoring_end_day,
        })
    }

    pub fn green_end(&self) -> u32 {
        self.onset_day
    }

    pub fn red_start(&self) -> u32 {
        self.manifest_day
    }

    /// Linear ramp from 0 at onset to 1 at manifestation; `day` may be fractional.
    pub fn severity(&self, day: f64) -> f64 {
        let (a, b) = (self.onset_day as f64, self.manifest_day as f64);
        if day < a {
            0.0
        } else if day >= b || b <= a {
            1.0
        } else {
            (day - a) / (b - a)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetConfig {
    pub first_wheel_id: u32,
    pub n_wheels: usize,
    pub monitoring_days: u32,
    pub passes_per_day: f64,
    /// km/h
    pub speed_range: [f32; 2],
    /// kN
    pub load_range: [f32; 2],
    pub checkpoints: usize,
    /// Standard deviation of the per-sensor gain around 1.
    pub calibration_sigma: f64,
    /// Gaussian noise relative to the load.
    pub noise_level: f64,
    pub visit_interval_days: u32,
    /// Samples per sensor segment at 100 km/h.
    pub nominal_segment_length: usize,
    pub base_timestamp: u64,
    pub faults: Vec<FaultAssignment>,
}

impl Default for FleetConfig {
    fn default() -> Self {
        Self {
            first_wheel_id: 0,
            n_wheels: 16,
            monitoring_days: 120,
            passes_per_day: 5.0,
            speed_range: [60.0, 140.0],
            load_range: [50.0, 110.0],
            checkpoints: 4,
            calibration_sigma: 0.03,
            noise_level: 0.01,
            visit_interval_days: 60,
            nominal_segment_length: 130,
            base_timestamp: DEFAULT_BASE_TIMESTAMP,
            faults: Vec::new(),
        }
    }
}

impl FleetConfig {
    pub fn wheel_ids(&self) -> std::ops::Range<u32> {
        self.first_wheel_id..self.first_wheel_id + self.n_wheels as u32
    }

    /// Visit days `0, interval, 2 * interval, ...` before the monitoring end.
    pub fn visit_days(&self) -> Vec<u32> {
        (0..self.monitoring_days).step_by(self.visit_interval_days.max(1) as usize).collect()
    }

    fn next_visit_after(&self, day: u32) -> u32 {
        self.visit_days()
            .into_iter()
            .find(|&v| v > day)
            .unwrap_or(self.monitoring_days)
    }

    pub fn annotation_for(&self, fault: &FaultAssignment) -> Result<ZoneAnnotation> {
        ZoneAnnotation::new(fault.onset_day, fault.manifest_day, self.next_visit_after(fault.onset_day))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_wheels == 0 || self.monitoring_days == 0 {
            return bad("fleet needs at least one wheel and one day".into());
        }
        if !(self.passes_per_day > 0.0) {
            return bad(format!("passes per day must be positive, got {}", self.passes_per_day));
        }
        if !(self.speed_range[0] > 0.0 && self.speed_range[0] <= self.speed_range[1]) {
            return bad(format!("invalid speed range {:?}", self.speed_range));
        }
        if !(self.load_range[0] > 0.0 && self.load_range[0] <= self.load_range[1]) {
            return bad(format!("invalid load range {:?}", self.load_range));
        }
        if self.checkpoints == 0 || self.nominal_segment_length < 2 || self.visit_interval_days == 0 {
            return bad("checkpoints, segment length and visit interval must be positive".into());
        }
        if !(self.calibration_sigma >= 0.0 && self.noise_level >= 0.0) {
            return bad("calibration sigma and noise level must be non-negative".into());
        }
        let ids = self.wheel_ids();
        let mut seen = std::collections::BTreeSet::new();
        for f in &self.faults {
            if !ids.contains(&f.wheel_id) {
                return bad(format!("fault assigned to wheel {} outside the fleet", f.wheel_id));
            }
            if !seen.insert(f.wheel_id) {
                return bad(format!("wheel {} has more than one fault", f.wheel_id));
            }
            let next = self.next_visit_after(f.onset_day);
            if !(f.onset_day < f.manifest_day && f.manifest_day < next) {
                return bad(format!(
                    "wheel {}: need onset {} < manifest {} < next workshop visit {next}",
                    f.wheel_id, f.onset_day, f.manifest_day
                ));
            }
        }
        Ok(())
    }
}

/// Per-wheel measurement history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WheelTimeline {
    pub wheel_id: u32,
    /// Workshop-visit timestamps.
    pub visits: Vec<u64>,
    pub measurements: Vec<Measurement>,
    pub fault: Option<FaultKind>,
    pub annotation: Option<ZoneAnnotation>,
}

impl WheelTimeline {
    pub fn timestamps(&self) -> Vec<u64> {
        self.measurements.iter().map(|m| m.timestamp).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    pub config: FleetConfig,
    pub wheels: Vec<WheelTimeline>,
}

/// Circular distance in revolutions, signed in `[-0.5, 0.5)`.
fn wrap(d: f64) -> f64 {
    d - (d + 0.5).floor()
}

fn gauss(d: f64, sigma: f64) -> f64 {
    (-0.5 * (d / sigma).powi(2)).exp()
}

/// Relative force change of `kind` at angular offset `d` from the fault site.
fn fault_profile(kind: FaultKind, d: f64) -> f64 {
    match kind {
        FaultKind::Shelling => SHELLING_OFFSETS
            .iter()
            .zip(SHELLING_WEIGHTS)
            .map(|(o, w)| w * SHELLING_AMPLITUDE * gauss(wrap(d - o), SHELLING_SIGMA))
            .sum(),
        FaultKind::Crack => -CRACK_AMPLITUDE * gauss(d, CRACK_SIGMA),
        FaultKind::Flat => {
            let ring = if d > 0.0 {
                FLAT_RING_AMPLITUDE * (-d / FLAT_RING_DECAY).exp() * (TAU * d / FLAT_RING_PERIOD).sin()
            } else {
                0.0
            };
            FLAT_AMPLITUDE * gauss(d, FLAT_SIGMA) + ring
        }
    }
}

/// Scales each sample by `1 + severity * profile` around the fault site.
/// `position` is the site's offset, in revolutions, from the start of the
/// first segment; segments are assumed to cover one revolution in equal parts.
pub fn inject_fault(
    segments: &[Vec<f32>],
    kind: FaultKind,
    severity: f64,
    position: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f32>>> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::Config(format!("severity must lie in [0, 1], got {severity}")));
    }
    let jitter = 1.0 + FAULT_JITTER * rng.random_range(-1.0..1.0);
    if severity == 0.0 {
        return Ok(segments.to_vec());
    }
    let count = segments.len() as f64;
    Ok(segments
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            let n = seg.len() as f64;
            seg.iter()
                .enumerate()
                .map(|(j, &x)| {
                    let u = (i as f64 + j as f64 / n) / count;
                    let d = wrap(u - position);
                    (x as f64 * (1.0 + severity * jitter * fault_profile(kind, d))) as f32
                })
                .collect()
        })
        .collect())
}

/// Per-checkpoint, per-sensor gains shared by every wheel of a seed.
pub fn checkpoint_gains(config: &FleetConfig, seed: u64) -> Vec<[f64; SENSOR_COUNT]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(1.0, config.calibration_sigma).expect("sigma validated");
    (0..config.checkpoints)
        .map(|_| std::array::from_fn(|_| normal.sample(&mut rng)))
        .collect()
}

/// Out-of-roundness state of a wheel for one interval between visits.
#[derive(Debug, Clone, Copy)]
struct Profile {
    base: [f64; 3],
    /// Harmonic growth per day since the last visit.
    drift: [f64; 3],
    phase: [f64; 3],
}

impl Profile {
    fn draw(rng: &mut impl Rng) -> Self {
        Self {
            base: [rng.random_range(0.005..0.02), rng.random_range(0.003..0.012), rng.random_range(0.002..0.008)],
            drift: [rng.random_range(0.0003..0.0006), rng.random_range(0.00015..0.0003), rng.random_range(0.000075..0.00015)],
            phase: std::array::from_fn(|_| rng.random_range(0.0..TAU)),
        }
    }

    fn value(&self, u: f64, days_since_visit: f64) -> f64 {
        (0..3)
            .map(|k| {
                let amp = self.base[k] + self.drift[k] * days_since_visit;
                amp * (TAU * (k + 1) as f64 * u + self.phase[k]).cos()
            })
            .sum()
    }
}

fn wheel_rng(seed: u64, wheel_id: u32, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((wheel_id as u64) << 2 | purpose) + 1);
    rng
}

fn simulate_wheel(
    config: &FleetConfig,
    gains: &[[f64; SENSOR_COUNT]],
    wheel_id: u32,
    fault: Option<&FaultAssignment>,
    seed: u64,
) -> Result<WheelTimeline> {
    let mut rng = wheel_rng(seed, wheel_id, 0);
    let mut fault_rng = wheel_rng(seed, wheel_id, 1);
    let poisson = Poisson::new(config.passes_per_day).expect("rate validated");
    let noise = Normal::new(0.0, config.noise_level).expect("noise validated");
    let visits = config.visit_days();
    let annotation = fault.map(|f| config.annotation_for(f)).transpose()?;
    let end_day = annotation.map_or(config.monitoring_days, |a| a.monitoring_end_day);
    let fault_site: f64 = fault_rng.random_range(0.0..1.0);

    let mut profile = Profile::draw(&mut rng);
    let mut measurements = Vec::new();
    for day in 0..end_day {
        if day > 0 && visits.contains(&day) {
            profile = Profile::draw(&mut rng);
        }
        let last_visit = visits.iter().rev().find(|&&v| v <= day).copied().unwrap_or(0);
        let passes = poisson.sample(&mut rng) as usize;
        let mut seconds: Vec<u64> = (0..passes).map(|_| rng.random_range(0..SECONDS_PER_DAY)).collect();
        seconds.sort_unstable();
        for s in seconds {
            let timestamp = config.base_timestamp + day as u64 * SECONDS_PER_DAY + s;
            let day_f = day as f64 + s as f64 / SECONDS_PER_DAY as f64;
            let since_visit = day_f - last_visit as f64;
            let speed = rng.random_range(config.speed_range[0]..=config.speed_range[1]);
            let load = rng.random_range(config.load_range[0]..=config.load_range[1]);
            let checkpoint = rng.random_range(0..config.checkpoints);
            let start_angle: f64 = rng.random_range(0.0..1.0);
            let n = ((config.nominal_segment_length as f64 * 100.0 / speed as f64).round() as usize).max(2);
            let gain = &gains[checkpoint];
            let segments: Vec<Vec<f32>> = (0..SENSOR_COUNT)
                .map(|i| {
                    (0..n)
                        .map(|j| {
                            let u = start_angle + (i as f64 + j as f64 / n as f64) / SENSOR_COUNT as f64;
                            let clean = 1.0 + profile.value(u, since_visit);
                            (load as f64 * (gain[i] * clean + noise.sample(&mut rng))) as f32
                        })
                        .collect()
                })
                .collect();
            let segments = match (fault, annotation) {
                (Some(f), Some(a)) => inject_fault(
                    &segments,
                    f.kind,
                    a.severity(day_f),
                    (fault_site - start_angle).rem_euclid(1.0),
                    &mut fault_rng,
                )?,
                _ => segments,
            };
            measurements.push(Measurement {
                wheel_id,
                checkpoint_id: checkpoint as u32,
                timestamp,
                speed,
                load,
                segments,
            });
        }
    }
    Ok(WheelTimeline {
        wheel_id,
        visits: visits
            .iter()
            .filter(|&&v| v < end_day)
            .map(|&v| config.base_timestamp + v as u64 * SECONDS_PER_DAY)
            .collect(),
        measurements,
        fault: fault.map(|f| f.kind),
        annotation,
    })
}

/// Generates every wheel of the fleet; each wheel draws from its own stream
/// derived from `(seed, wheel_id)`.
pub fn simulate_fleet(config: &FleetConfig, seed: u64) -> Result<Fleet> {
    config.validate()?;
    let gains = checkpoint_gains(config, seed);
    let wheels = config
        .wheel_ids()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|id| {
            let fault = config.faults.iter().find(|f| f.wheel_id == id);
            simulate_wheel(config, &gains, id, fault, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Fleet {
        config: config.clone(),
        wheels,
    })
}

/// Faults spread over the test wheels: `counts[k]` wheels of `kinds[k]`,
/// assigned after `healthy` fault-free wheels. Onset and manifestation fall
/// inside a randomly chosen visit interval.
pub fn assign_faults(config: &FleetConfig, healthy: usize, kinds: &[(FaultKind, usize)], seed: u64) -> Result<Vec<FaultAssignment>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfa17);
    let visits = config.visit_days();
    let mut out = Vec::new();
    let mut id = config.first_wheel_id + healthy as u32;
    for &(kind, count) in kinds {
        for _ in 0..count {
            let k = rng.random_range(0..visits.len());
            let start = visits[k];
            let end = visits.get(k + 1).copied().unwrap_or(config.monitoring_days);
            let span = end - start;
            if span < 12 {
                return Err(Error::Config(format!("visit interval of {span} days is too short for a fault ramp")));
            }
            let onset = start + rng.random_range(span / 6..span / 2);
            let manifest = onset + rng.random_range(span / 6..=span / 3).min(end - onset - 1);
            out.push(FaultAssignment {
                wheel_id: id,
                kind,
                onset_day: onset,
                manifest_day: manifest,
            });
            id += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub signal_length: usize,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub noise_level: f64,
    /// Probability of a nuisance impulse in the training and test splits.
    pub nuisance_rate: [f64; 2],
    /// Calibration gain spread in the training and test splits.
    pub gain_sigma: [f64; 2],
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            signal_length: 256,
            train_per_category: 600,
            test_per_category: 60,
            noise_level: 0.02,
            nuisance_rate: [0.1, 0.6],
            gain_sigma: [0.02, 0.04],
        }
    }
}

pub const TOY_CATEGORIES: [&str; 3] = ["healthy", "crack", "spalling"];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub train_signals: Vec<Vec<f32>>,
    pub train_labels: Vec<usize>,
    pub test_signals: Vec<Vec<f32>>,
    pub test_labels: Vec<usize>,
}

/// Three categories on a smooth positive background: no defect, a narrow
/// dip, a broad bump. Nuisance factors are a narrow positive impulse and
/// piecewise sensor gains; both are label-independent and stronger in the
/// test split.
pub fn supervised_toy(config: &ToyConfig, seed: u64) -> Result<ToyDataset> {
    if config.signal_length < 32 || config.train_per_category == 0 || config.test_per_category == 0 {
        return Err(Error::Config("toy dataset needs length >= 32 and non-empty splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = |per: usize, nuisance: f64, sigma: f64, rng: &mut ChaCha8Rng| {
        let mut signals = Vec::with_capacity(3 * per);
        let mut labels = Vec::with_capacity(3 * per);
        for i in 0..3 * per {
            let c = i % 3;
            signals.push(toy_signal(config, c, nuisance, sigma, rng));
            labels.push(c);
        }
        (signals, labels)
    };
    let (train_signals, train_labels) = split(config.train_per_category, config.nuisance_rate[0], config.gain_sigma[0], &mut rng);
    let (test_signals, test_labels) = split(config.test_per_category, config.nuisance_rate[1], config.gain_sigma[1], &mut rng);
    Ok(ToyDataset {
        train_signals,
        train_labels,
        test_signals,
        test_labels,
    })
}

fn toy_signal(config: &ToyConfig, category: usize, nuisance: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = config.signal_length;
    let amps: [f64; 2] = [rng.random_range(0.0..0.08), rng.random_range(0.0..0.04)];
    let phases: [f64; 2] = [rng.random_range(0.0..TAU), rng.random_range(0.0..TAU)];
    let gains: Vec<f64> = (0..SENSOR_COUNT).map(|_| 1.0 + sigma * rng.random_range(-1.7..1.7)).collect();
    let site: f64 = rng.random_range(0.1..0.9);
    let strength: f64 = rng.random_range(0.7..1.3);
    let stone = rng.random_bool(nuisance).then(|| rng.random_range(0.05..0.95));
    let level: f64 = rng.random_range(20.0..80.0);
    (0..n)
        .map(|j| {
            let u = j as f64 / n as f64;
            let mut v = 1.0 + amps[0] * (TAU * u + phases[0]).cos() + amps[1] * (2.0 * TAU * u + phases[1]).cos();
            v += match category {
                1 => -0.25 * strength * gauss(u - site, 0.006),
                2 => 0.2 * strength * gauss(u - site, 0.03),
                _ => 0.0,
            };
            if let Some(s) = stone {
                v += 0.25 * gauss(u - s, 0.004);
            }
            v *= gains[j * SENSOR_COUNT / n];
            v += config.noise_level * rng.random_range(-1.7..1.7);
            (level * v) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::dyn_coeff;
    use crate::prep::{prepare, SIGNAL_LENGTH};

    fn small_config() -> FleetConfig {
        FleetConfig {
            n_wheels: 3,
            monitoring_days: 20,
            visit_interval_days: 10,
            ..Default::default()
        }
    }

    #[test]
    fn fault_free_fleet_is_healthy() {
        let fleet = simulate_fleet(&small_config(), 1).unwrap();
        assert_eq!(fleet.wheels.len(), 3);
        for w in &fleet.wheels {
            assert!(w.annotation.is_none() && w.fault.is_none());
            assert!(w.measurements.len() > 50);
            assert_eq!(w.visits.len(), 2);
            assert!(w.measurements.iter().all(|m| m.validate().is_ok()));
        }
    }

    #[test]
    fn fleets_are_deterministic_per_seed() {
        let a = simulate_fleet(&small_config(), 4).unwrap();
        let b = simulate_fleet(&small_config(), 4).unwrap();
        let c = simulate_fleet(&small_config(), 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.wheels, c.wheels);
    }

    #[test]
    fn segment_length_shrinks_with_speed() {
        let fleet = simulate_fleet(&small_config(), 2).unwrap();
        let ms = &fleet.wheels[0].measurements;
        let slow = ms.iter().min_by(|a, b| a.speed.total_cmp(&b.speed)).unwrap();
        let fast = ms.iter().max_by(|a, b| a.speed.total_cmp(&b.speed)).unwrap();
        assert!(slow.segments[0].len() > fast.segments[0].len());
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let mut cfg = small_config();
        cfg.faults.push(FaultAssignment {
            wheel_id: 1,
            kind: FaultKind::Crack,
            onset_day: 5,
            manifest_day: 12,
        });
        assert!(matches!(simulate_fleet(&cfg, 1), Err(Error::Config(_))));
        cfg.faults[0].manifest_day = 4;
        assert!(simulate_fleet(&cfg, 1).is_err());
        cfg.faults[0] = FaultAssignment {
            wheel_id: 7,
            kind: FaultKind::Crack,
            onset_day: 2,
            manifest_day: 4,
        };
        assert!(simulate_fleet(&cfg, 1).is_err());
        assert!("dent".parse::<FaultKind>().is_err());
        assert_eq!("flat".parse::<FaultKind>().unwrap(), FaultKind::Flat);
    }

    fn base_segments() -> Vec<Vec<f32>> {
        (0..8)
            .map(|i| (0..130).map(|j| 80.0 + ((i * 130 + j) as f32 * 0.01).sin()).collect())
            .collect()
    }

    fn max_delta(a: &[Vec<f32>], b: &[Vec<f32>]) -> f32 {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    #[test]
    fn zero_severity_is_identity() {
        let base = base_segments();
        for kind in FaultKind::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            assert_eq!(inject_fault(&base, kind, 0.0, 0.3, &mut rng).unwrap(), base);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(inject_fault(&base, FaultKind::Flat, 1.5, 0.3, &mut rng).is_err());
    }

    #[test]
    fn crack_is_weaker_than_shelling() {
        let base = base_segments();
        let run = |kind| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            inject_fault(&base, kind, 1.0, 0.4, &mut rng).unwrap()
        };
        let crack = max_delta(&base, &run(FaultKind::Crack));
        let shelling = max_delta(&base, &run(FaultKind::Shelling));
        assert!(crack < shelling, "crack {crack} shelling {shelling}");
        assert!(crack <= 0.4 * shelling);
    }

    #[test]
    fn full_flat_exceeds_dyn_coeff_threshold() {
        let base = base_segments();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Measurement {
            wheel_id: 0,
            checkpoint_id: 0,
            timestamp: 0,
            speed: 100.0,
            load: 80.0,
            segments: inject_fault(&base, FaultKind::Flat, 1.0, 0.55, &mut rng).unwrap(),
        };
        let p = prepare(&m, SIGNAL_LENGTH).unwrap();
        assert!(dyn_coeff(&p.values).unwrap() > 1.8);
    }

    #[test]
    fn flat_wheel_exceeds_its_healthy_twin() {
        let mut cfg = small_config();
        cfg.n_wheels = 1;
        let healthy = simulate_fleet(&cfg, 9).unwrap();
        cfg.faults.push(FaultAssignment {
            wheel_id: 0,
            kind: FaultKind::Flat,
            onset_day: 2,
            manifest_day: 6,
        });
        let faulty = simulate_fleet(&cfg, 9).unwrap();
        let day = |m: &Measurement| (m.timestamp - cfg.base_timestamp) / SECONDS_PER_DAY;
        let pick = |f: &Fleet| f.wheels[0].measurements.iter().find(|m| day(m) == 7).unwrap().clone();
        let (h, f) = (pick(&healthy), pick(&faulty));
        assert_eq!(h.timestamp, f.timestamp);
        let dc = |m: &Measurement| dyn_coeff(&prepare(m, SIGNAL_LENGTH).unwrap().values).unwrap();
        assert!(dc(&f) > dc(&h));
        assert!(dc(&f) > 1.8);
    }

    #[test]
    fn healthy_dyn_coeff_stays_below_threshold() {
        let cfg = FleetConfig {
            n_wheels: 4,
            monitoring_days: 60,
            ..Default::default()
        };
        let fleet = simulate_fleet(&cfg, 11).unwrap();
        let all: Vec<f64> = fleet
            .wheels
            .iter()
            .flat_map(|w| &w.measurements)
            .map(|m| dyn_coeff(&prepare(m, SIGNAL_LENGTH).unwrap().values).unwrap())
            .collect();
        let above = all.iter().filter(|&&v| v >= 1.8).count();
        assert!((above as f64) <= 0.01 * all.len() as f64, "{above} of {}", all.len());
    }

    #[test]
    fn severity_ramps_monotonically() {
        let a = ZoneAnnotation::new(10, 20, 30).unwrap();
        assert_eq!(a.severity(5.0), 0.0);
        assert_eq!(a.severity(15.0), 0.5);
        assert_eq!(a.severity(25.0), 1.0);
        let days: Vec<f64> = (0..300).map(|d| d as f64 / 10.0).collect();
        assert!(days.windows(2).all(|w| a.severity(w[0]) <= a.severity(w[1])));
    }

    #[test]
    fn assigned_faults_form_valid_schedules() {
        let mut cfg = FleetConfig {
            n_wheels: 30,
            ..Default::default()
        };
        cfg.faults = assign_faults(&cfg, 10, &[(FaultKind::Shelling, 10), (FaultKind::Crack, 10)], 7).unwrap();
        assert_eq!(cfg.faults.len(), 20);
        assert_eq!(cfg.faults[0].wheel_id, 10);
        cfg.validate().unwrap();
    }

    #[test]
    fn toy_dataset_shapes() {
        let d = supervised_toy(&ToyConfig::default(), 1).unwrap();
        assert_eq!(d.train_signals.len(), 1800);
        assert_eq!(d.test_signals.len(), 180);
        assert!(d.train_signals.iter().all(|s| s.len() == 256 && s.iter().all(|&v| v > 0.0)));
        assert_eq!(d, supervised_toy(&ToyConfig::default(), 1).unwrap());
    }
}
