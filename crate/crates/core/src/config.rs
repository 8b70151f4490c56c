//! Experiment configuration, read from JSON. Unknown keys are rejected at
//! every level; every key except `seed` has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::contrastive::{TrainSpec, DEFAULT_BUCKET_DAYS};
use crate::detection::{DEFAULT_DYN_COEFF_THRESHOLD, DEFAULT_HEALTH_THRESHOLD, DEFAULT_WINDOW};
use crate::encoders::{SupervisedHeadConfig, WheelEncoderConfig};
use crate::error::{Error, Result};
use crate::helm::HelmConfig;
use crate::nn::OptimizerKind;
use crate::occ::OcSvmConfig;
use crate::sim::{FaultKind, FleetConfig, ToyConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    WheelUnsupervised,
    SupervisedToy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    ContrastiveOcsvm,
    Helm,
    Dyncoeff,
    Ensemble,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [Self::ContrastiveOcsvm, Self::Helm, Self::Dyncoeff, Self::Ensemble];

    pub fn name(self) -> &'static str {
        match self {
            Self::ContrastiveOcsvm => "contrastive-ocsvm",
            Self::Helm => "helm",
            Self::Dyncoeff => "dyncoeff",
            Self::Ensemble => "ensemble",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub contrastive_ocsvm: f64,
    pub helm: f64,
    pub dyncoeff: f64,
    /// Median window of the detection rule.
    pub window: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            contrastive_ocsvm: DEFAULT_HEALTH_THRESHOLD,
            helm: DEFAULT_HEALTH_THRESHOLD,
            dyncoeff: DEFAULT_DYN_COEFF_THRESHOLD,
            window: DEFAULT_WINDOW,
        }
    }
}

impl Thresholds {
    pub fn for_detector(&self, kind: DetectorKind) -> Option<f64> {
        match kind {
            DetectorKind::ContrastiveOcsvm => Some(self.contrastive_ocsvm),
            DetectorKind::Helm => Some(self.helm),
            DetectorKind::Dyncoeff => Some(self.dyncoeff),
            DetectorKind::Ensemble => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultCount {
    pub kind: FaultKind,
    pub count: usize,
}

/// Fleets generated when no dataset is given. Train and test wheels share
/// the checkpoints but have disjoint ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Healthy training fleet; `faults` must stay empty.
    pub train: FleetConfig,
    pub test_first_wheel_id: u32,
    pub test_healthy: usize,
    pub test_faults: Vec<FaultCount>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            train: FleetConfig::default(),
            test_first_wheel_id: 1000,
            test_healthy: 10,
            test_faults: vec![
                FaultCount {
                    kind: FaultKind::Shelling,
                    count: 10,
                },
                FaultCount {
                    kind: FaultKind::Crack,
                    count: 10,
                },
            ],
        }
    }
}

impl SimulationConfig {
    pub fn test_wheels(&self) -> usize {
        self.test_healthy + self.test_faults.iter().map(|f| f.count).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !self.train.faults.is_empty() {
            return Err(Error::Config("the training fleet must not contain faults".into()));
        }
        let train = self.train.wheel_ids();
        let test = self.test_first_wheel_id..self.test_first_wheel_id.saturating_add(self.test_wheels() as u32);
        if train.start < test.end && test.start < train.end {
            return Err(Error::Config(format!(
                "train wheel ids {train:?} overlap test wheel ids {test:?}"
            )));
        }
        if self.test_wheels() == 0 {
            return Err(Error::Config("the test fleet is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub task: Task,
    /// Directory written by `simulate`; the fleets are generated in memory
    /// when absent.
    pub dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub simulation: SimulationConfig,
    pub toy: ToyConfig,
    /// For the toy task the input length follows `toy.signal_length`.
    pub encoder: WheelEncoderConfig,
    pub head: SupervisedHeadConfig,
    /// Triplet training; its `seed` is replaced by one derived from `seed`.
    pub train: TrainSpec,
    /// Classifier phase of the toy task.
    pub classifier: TrainSpec,
    pub bucket_days: u32,
    pub ocsvm: OcSvmConfig,
    /// Training points handed to the OC-SVM, taken at an even stride.
    pub ocsvm_max_train: usize,
    pub helm: HelmConfig,
    pub helm_max_train: usize,
    pub detectors: Vec<DetectorKind>,
    pub thresholds: Thresholds,
    pub plots: bool,
}

/// Recursively overlays `patch` on `base`; non-object values replace.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Defaults of `task` for the given seed.
    pub fn defaults(seed: u64, task: Task) -> Self {
        let train = match task {
            Task::WheelUnsupervised => TrainSpec {
                epochs: 30,
                batches_per_epoch: Some(40),
                ..TrainSpec::default()
            },
            Task::SupervisedToy => TrainSpec::default(),
        };
        Self {
            seed,
            task,
            dataset: None,
            output_dir: PathBuf::from("out"),
            simulation: SimulationConfig::default(),
            toy: ToyConfig::default(),
            encoder: WheelEncoderConfig::default(),
            head: SupervisedHeadConfig::default(),
            train,
            classifier: TrainSpec {
                optimizer: OptimizerKind::Adam { learning_rate: 1e-2 },
                ..TrainSpec::default()
            },
            bucket_days: DEFAULT_BUCKET_DAYS,
            ocsvm: OcSvmConfig::default(),
            ocsvm_max_train: 2000,
            helm: HelmConfig::default(),
            helm_max_train: 4000,
            detectors: DetectorKind::ALL.to_vec(),
            thresholds: Thresholds::default(),
            plots: false,
        }
    }

    /// Wheel-task defaults for the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self::defaults(seed, Task::WheelUnsupervised)
    }

    /// Parses a config. Keys absent at any depth take the defaults of the
    /// selected task; unknown keys are errors.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |e: serde_json::Error| Error::Config(format!("invalid experiment config: {e}"));
        let user: Value = serde_json::from_str(text).map_err(bad)?;
        if !user.is_object() {
            return Err(Error::Config("experiment config must be a JSON object".into()));
        }
        let seed = match user.get("seed") {
            Some(v) => u64::deserialize(v).map_err(bad)?,
            None => return Err(Error::Config("invalid experiment config: missing field `seed`".into())),
        };
        let task = match user.get("task") {
            Some(v) => Task::deserialize(v).map_err(bad)?,
            None => Task::WheelUnsupervised,
        };
        let mut merged = serde_json::to_value(Self::defaults(seed, task)).map_err(bad)?;
        merge(&mut merged, user);
        Self::deserialize(merged).map_err(bad)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn has_detector(&self, kind: DetectorKind) -> bool {
        self.detectors.contains(&kind)
    }

    /// Encoder settings actually used by the task.
    pub fn effective_encoder(&self) -> WheelEncoderConfig {
        match self.task {
            Task::WheelUnsupervised => self.encoder.clone(),
            Task::SupervisedToy => WheelEncoderConfig {
                input_length: self.toy.signal_length,
                ..self.encoder.clone()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.effective_encoder().validate()?;
        self.train.validate()?;
        self.helm.validate()?;
        if !(self.ocsvm.nu > 0.0 && self.ocsvm.nu <= 1.0) {
            return Err(Error::Config(format!("nu must lie in (0, 1], got {}", self.ocsvm.nu)));
        }
        if self.bucket_days == 0 {
            return Err(Error::Config("bucket_days must be >= 1".into()));
        }
        if self.ocsvm_max_train == 0 || self.helm_max_train == 0 {
            return Err(Error::Config("detector training caps must be positive".into()));
        }
        if self.thresholds.window == 0 {
            return Err(Error::Config("detection window must be >= 1".into()));
        }
        match self.task {
            Task::WheelUnsupervised => {
                if self.detectors.is_empty() {
                    return Err(Error::Config("no detector selected".into()));
                }
                let mut sorted = self.detectors.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != self.detectors.len() {
                    return Err(Error::Config("detectors are listed more than once".into()));
                }
                if self.has_detector(DetectorKind::Ensemble)
                    && !(self.has_detector(DetectorKind::ContrastiveOcsvm) && self.has_detector(DetectorKind::Helm))
                {
                    return Err(Error::Config(
                        "the ensemble needs both contrastive-ocsvm and helm among the detectors".into(),
                    ));
                }
                if self.dataset.is_none() {
                    self.simulation.validate()?;
                } else if let Some(d) = &self.dataset {
                    if !d.is_dir() {
                        return Err(Error::Config(format!("dataset directory {} does not exist", d.display())));
                    }
                }
            }
            Task::SupervisedToy => {
                self.head.validate()?;
                self.classifier.validate()?;
            }
        }
        Ok(())
    }
}
