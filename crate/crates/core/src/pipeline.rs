//! End-to-end experiment: simulate or load, prepare, train the encoder, fit
//! the detectors, score the test wheels, detect and evaluate.
//!
//! Every stage is a plain function so the CLI can run them one at a time
//! through files; [`run_pipeline`] chains them in memory and writes the
//! artifacts. Stage errors carry the stage name.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, TAG_HELM, TAG_OCSVM};
use crate::config::{DetectorKind, ExperimentConfig, Task};
use crate::contrastive::{
    temporal_pair_labels, train_contrastive, train_cross_entropy, train_supervised_classifier, LossHistory,
    PairLabel, TrainSpec,
};
use crate::detection::{detect, dyn_coeff, ensemble_or, DetectionResult, HealthPoint, HealthSeries};
use crate::encoders::{
    argmax, build_classifier_head, build_supervised_encoder, build_wheel_encoder, classify, encode_batch,
};
use crate::error::{Error, Result};
use crate::evaluation::{build_report, health_svg, ClassificationReport, ConfusionMatrix, EvalReport, WheelTruth};
use crate::helm::{fit_helm, helm_health, HelmModel};
use crate::io::manifest::{read_manifest, read_split, write_dataset, Split};
use crate::io::prepared::{PreparedData, PreparedWheel};
use crate::io::{health_csv, write_atomic};
use crate::nn::Network;
use crate::occ::{fit_ocsvm, health_index, OcSvmModel};
use crate::prep::{concatenate_sensors, prepare, standardize};
use crate::sim::{assign_faults, simulate_fleet, supervised_toy, Fleet, FleetConfig, WheelTimeline, TOY_CATEGORIES};

pub const DATASET_DIR: &str = "dataset";
pub const PREPARED_FILE: &str = "prepared.prp";
pub const CHECKPOINT_FILE: &str = "model.rhm";
pub const LOSS_FILE: &str = "loss.csv";
pub const HEALTH_FILE: &str = "health.csv";
pub const DETECTIONS_FILE: &str = "detections.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const PLOTS_DIR: &str = "plots";
/// Present while a run is in progress or after it failed.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

pub const ENCODER_SECTION: &str = "encoder";
pub const HEAD_SECTION: &str = "head";
pub const CE_ENCODER_SECTION: &str = "ce-encoder";
pub const CE_HEAD_SECTION: &str = "ce-head";
pub const OCSVM_SECTION: &str = "ocsvm";
pub const HELM_SECTION: &str = "helm";

/// Independent sub-seeds for the stochastic stages.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Faults = 1,
    EncoderInit,
    EncoderTrain,
    Helm,
    HeadInit,
    HeadTrain,
    BaselineInit,
    BaselineTrain,
}

fn sub_seed(seed: u64, stream: Stream) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.next_u64()
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Stage commands other than `run` exist for the wheel task only.
pub fn require_wheel_task(config: &ExperimentConfig) -> Result<()> {
    match config.task {
        Task::WheelUnsupervised => Ok(()),
        Task::SupervisedToy => Err(Error::Config("this stage applies to the wheel task only".into())),
    }
}

/// Train and test fleets from the configured simulator settings.
pub fn simulate_fleets(config: &ExperimentConfig) -> Result<(Fleet, Fleet)> {
    let sim = &config.simulation;
    sim.validate()?;
    let train = simulate_fleet(&sim.train, config.seed)?;
    let mut test_cfg = FleetConfig {
        first_wheel_id: sim.test_first_wheel_id,
        n_wheels: sim.test_wheels(),
        faults: Vec::new(),
        ..sim.train.clone()
    };
    let kinds: Vec<_> = sim.test_faults.iter().map(|f| (f.kind, f.count)).collect();
    test_cfg.faults = assign_faults(&test_cfg, sim.test_healthy, &kinds, sub_seed(config.seed, Stream::Faults))?;
    let test = simulate_fleet(&test_cfg, config.seed)?;
    Ok((train, test))
}

/// Writes both fleets under `dir` and returns the timelines.
pub fn simulate_to(config: &ExperimentConfig, dir: &Path) -> Result<()> {
    let (train, test) = stage("simulate", simulate_fleets(config))?;
    stage("simulate", write_dataset(dir, &train, &test, config.seed).map(|_| ()))
}

/// Timelines of both splits and the base timestamp, read from the dataset
/// directory when configured and simulated otherwise.
pub fn load_timelines(config: &ExperimentConfig) -> Result<(Vec<WheelTimeline>, Vec<WheelTimeline>, u64)> {
    match &config.dataset {
        Some(dir) => {
            let manifest = read_manifest(dir)?;
            let train = read_split(dir, &manifest, Split::Train)?;
            let test = read_split(dir, &manifest, Split::Test)?;
            Ok((train, test, manifest.base_timestamp))
        }
        None => {
            let (train, test) = simulate_fleets(config)?;
            Ok((train.wheels, test.wheels, train.config.base_timestamp))
        }
    }
}

fn prepare_wheel(w: &WheelTimeline, split: Split, len: usize) -> Result<PreparedWheel> {
    if w.measurements.windows(2).any(|p| p[1].timestamp < p[0].timestamp) {
        return Err(Error::Ordering(format!("measurements of wheel {} are not time-sorted", w.wheel_id)));
    }
    let rows = w
        .measurements
        .par_iter()
        .map(|m| {
            let dc = dyn_coeff(&concatenate_sensors(m)?)?;
            Ok((m.timestamp, dc, prepare(m, len)?.values))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = PreparedWheel {
        wheel_id: w.wheel_id,
        split,
        fault: w.fault,
        annotation: w.annotation,
        visits: w.visits.clone(),
        timestamps: Vec::with_capacity(rows.len()),
        dyn_coeffs: Vec::with_capacity(rows.len()),
        signals: Vec::with_capacity(rows.len()),
    };
    for (t, d, s) in rows {
        out.timestamps.push(t);
        out.dyn_coeffs.push(d);
        out.signals.push(s);
    }
    Ok(out)
}

pub fn prepare_timelines(
    train: &[WheelTimeline],
    test: &[WheelTimeline],
    base_timestamp: u64,
    signal_length: usize,
) -> Result<PreparedData> {
    if let Some(w) = train.iter().find(|w| w.fault.is_some()) {
        return Err(Error::Data(format!("training wheel {} carries a fault", w.wheel_id)));
    }
    let wheels = train
        .iter()
        .map(|w| prepare_wheel(w, Split::Train, signal_length))
        .chain(test.iter().map(|w| prepare_wheel(w, Split::Test, signal_length)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedData {
        base_timestamp,
        signal_length,
        wheels,
    })
}

fn train_signals(data: &PreparedData) -> Vec<&[f32]> {
    data.split(Split::Train)
        .into_iter()
        .flat_map(|w| w.signals.iter().map(Vec::as_slice))
        .collect()
}

/// `min(n, cap)` indices spread evenly over `0..n`.
pub fn strided(n: usize, cap: usize) -> Vec<usize> {
    let m = n.min(cap);
    (0..m).map(|i| i * n / m).collect()
}

fn with_seed(spec: &TrainSpec, seed: u64) -> TrainSpec {
    TrainSpec { seed, ..spec.clone() }
}

/// Triplet training of the wheel encoder on time-bucket labels.
pub fn train_wheel_encoder(config: &ExperimentConfig, data: &PreparedData) -> Result<(Network, LossHistory)> {
    let mut signals = Vec::new();
    let mut labels: Vec<PairLabel> = Vec::new();
    for w in data.split(Split::Train) {
        let l = temporal_pair_labels(w.wheel_id, &w.timestamps, &w.visits, config.bucket_days)?;
        labels.extend(l.labels);
        signals.extend(w.signals.iter().map(Vec::as_slice));
    }
    let mut encoder = build_wheel_encoder(&config.effective_encoder(), sub_seed(config.seed, Stream::EncoderInit))?;
    let spec = with_seed(&config.train, sub_seed(config.seed, Stream::EncoderTrain));
    let history = train_contrastive(&mut encoder, &signals, &labels, &spec)?;
    Ok((encoder, history))
}

fn features_f64(encoder: &Network, signals: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
    Ok(encode_batch(encoder, signals)?.into_iter().map(|f| f.to_f64()).collect())
}

pub fn fit_occ_stage(config: &ExperimentConfig, encoder: &Network, data: &PreparedData) -> Result<OcSvmModel> {
    let all = train_signals(data);
    let picked: Vec<&[f32]> = strided(all.len(), config.ocsvm_max_train).into_iter().map(|i| all[i]).collect();
    let model = fit_ocsvm(&features_f64(encoder, &picked)?, &config.ocsvm)?;
    log::info!(
        "OC-SVM: {} support vectors, gamma {:.4}, {} SMO steps",
        model.support_vectors.len(),
        model.gamma,
        model.iterations
    );
    Ok(model)
}

pub fn fit_helm_stage(config: &ExperimentConfig, data: &PreparedData) -> Result<HelmModel> {
    let all = train_signals(data);
    let picked: Vec<&[f32]> = strided(all.len(), config.helm_max_train).into_iter().map(|i| all[i]).collect();
    fit_helm(&picked, &config.helm, sub_seed(config.seed, Stream::Helm))
}

/// Fitted models used for scoring; absent models skip their detector.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub encoder: Option<Network>,
    pub ocsvm: Option<OcSvmModel>,
    pub helm: Option<HelmModel>,
}

impl Models {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(Self {
            encoder: match ckpt.get(crate::checkpoint::TAG_NETWORK, ENCODER_SECTION) {
                Some(_) => Some(ckpt.network(ENCODER_SECTION)?),
                None => None,
            },
            ocsvm: ckpt.get(TAG_OCSVM, OCSVM_SECTION).map(OcSvmModel::from_bytes).transpose()?,
            helm: ckpt.get(TAG_HELM, HELM_SECTION).map(HelmModel::from_bytes).transpose()?,
        })
    }

    pub fn write_into(&self, ckpt: &mut Checkpoint) {
        if let Some(e) = &self.encoder {
            ckpt.insert_network(ENCODER_SECTION, e);
        }
        if let Some(m) = &self.ocsvm {
            ckpt.insert(TAG_OCSVM, OCSVM_SECTION, m.to_bytes());
        }
        if let Some(m) = &self.helm {
            ckpt.insert(TAG_HELM, HELM_SECTION, m.to_bytes());
        }
    }
}

fn series(wheel: &PreparedWheel, detector: DetectorKind, values: Vec<f64>) -> HealthSeries {
    let points = wheel
        .timestamps
        .iter()
        .zip(values)
        .map(|(&timestamp, value)| HealthPoint { timestamp, value })
        .collect();
    HealthSeries::new(wheel.wheel_id, detector.name(), points)
}

/// Health series of every test wheel under every selected scoring detector.
pub fn score_stage(config: &ExperimentConfig, models: &Models, data: &PreparedData) -> Result<Vec<HealthSeries>> {
    let mut out = Vec::new();
    for wheel in data.split(Split::Test) {
        if wheel.timestamps.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::Ordering(format!("wheel {} is not time-sorted", wheel.wheel_id)));
        }
        for kind in [DetectorKind::ContrastiveOcsvm, DetectorKind::Helm, DetectorKind::Dyncoeff] {
            if !config.has_detector(kind) {
                continue;
            }
            let values = match kind {
                DetectorKind::ContrastiveOcsvm => {
                    let (Some(encoder), Some(svm)) = (&models.encoder, &models.ocsvm) else {
                        return Err(Error::State("contrastive-ocsvm needs a trained encoder and OC-SVM".into()));
                    };
                    let signals: Vec<&[f32]> = wheel.signals.iter().map(Vec::as_slice).collect();
                    let feats = features_f64(encoder, &signals)?;
                    feats
                        .par_iter()
                        .zip(&wheel.timestamps)
                        .map(|(f, &t)| health_index(svm, f, t).map(|h| h.value))
                        .collect::<Result<Vec<_>>>()?
                }
                DetectorKind::Helm => {
                    let model = models
                        .helm
                        .as_ref()
                        .ok_or_else(|| Error::State("helm needs a fitted HELM model".into()))?;
                    helm_health(model, &wheel.signals, &wheel.timestamps)?
                        .into_iter()
                        .map(|h| h.value)
                        .collect()
                }
                _ => wheel.dyn_coeffs.clone(),
            };
            out.push(series(wheel, kind, values));
        }
    }
    Ok(out)
}

/// One detection per wheel for each selected detector, in selection order.
pub fn detect_stage(config: &ExperimentConfig, series: &[HealthSeries]) -> Result<Vec<(String, Vec<DetectionResult>)>> {
    let mut wheels: Vec<u32> = series.iter().map(|s| s.wheel_id).collect();
    wheels.sort_unstable();
    wheels.dedup();
    let mut out: Vec<(String, Vec<DetectionResult>)> = Vec::new();
    for &kind in &config.detectors {
        let Some(threshold) = config.thresholds.for_detector(kind) else {
            continue;
        };
        let results = wheels
            .iter()
            .map(|&id| {
                let s = series
                    .iter()
                    .find(|s| s.wheel_id == id && s.detector == kind.name())
                    .ok_or_else(|| Error::Data(format!("no {} series for wheel {id}", kind.name())))?;
                detect(s, threshold, config.thresholds.window)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((kind.name().to_string(), results));
    }
    if config.has_detector(DetectorKind::Ensemble) {
        let member = |k: DetectorKind| out.iter().find(|(n, _)| n == k.name()).map(|(_, r)| r.clone());
        let (Some(a), Some(b)) = (member(DetectorKind::ContrastiveOcsvm), member(DetectorKind::Helm)) else {
            return Err(Error::Config("the ensemble needs contrastive-ocsvm and helm detections".into()));
        };
        let merged = a
            .iter()
            .zip(&b)
            .map(|(x, y)| ensemble_or(&[x.clone(), y.clone()], DetectorKind::Ensemble.name()))
            .collect::<Result<Vec<_>>>()?;
        out.push((DetectorKind::Ensemble.name().to_string(), merged));
    }
    Ok(out)
}

pub fn truth_of(data: &PreparedData) -> Vec<WheelTruth> {
    data.split(Split::Test)
        .into_iter()
        .map(|w| WheelTruth {
            wheel_id: w.wheel_id,
            fault: w.fault,
            annotation: w.annotation,
        })
        .collect()
}

pub fn evaluate_stage(
    config: &ExperimentConfig,
    detections: &[(String, Vec<DetectionResult>)],
    data: &PreparedData,
) -> Result<EvalReport> {
    let mut report = build_report(detections, &truth_of(data), data.base_timestamp)?;
    if config.has_detector(DetectorKind::Ensemble) {
        report.ensemble = Some(DetectorKind::Ensemble.name().to_string());
    }
    Ok(report)
}

/// Files written by a run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: EvalReport,
    pub files: Vec<PathBuf>,
}

fn write_report(out: &Path, report: &EvalReport, files: &mut Vec<PathBuf>) -> Result<()> {
    let mut json = report.to_json();
    json.push('\n');
    for (name, body) in [(REPORT_JSON, json), (REPORT_TEXT, report.to_text())] {
        let p = out.join(name);
        write_atomic(&p, body.as_bytes())?;
        files.push(p);
    }
    Ok(())
}

fn write_plots(
    config: &ExperimentConfig,
    out: &Path,
    series: &[HealthSeries],
    data: &PreparedData,
    files: &mut Vec<PathBuf>,
) -> Result<()> {
    for s in series {
        let kind = DetectorKind::ALL.into_iter().find(|k| k.name() == s.detector);
        let threshold = kind.and_then(|k| config.thresholds.for_detector(k)).unwrap_or(f64::NAN);
        let annotation = data.wheels.iter().find(|w| w.wheel_id == s.wheel_id).and_then(|w| w.annotation);
        let svg = health_svg(std::slice::from_ref(s), annotation.as_ref(), threshold, data.base_timestamp);
        let p = out.join(PLOTS_DIR).join(format!("{:05}-{}.svg", s.wheel_id, s.detector));
        write_atomic(&p, svg.as_bytes())?;
        files.push(p);
    }
    Ok(())
}

fn run_wheel(config: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    let (train, test, base) = stage("load", load_timelines(config))?;
    let data = stage(
        "prep",
        prepare_timelines(&train, &test, base, config.effective_encoder().input_length),
    )?;
    drop((train, test));
    let mut files = Vec::new();
    let mut models = Models::default();
    let needs_encoder = config.has_detector(DetectorKind::ContrastiveOcsvm);
    if needs_encoder {
        let (encoder, history) = stage("train", train_wheel_encoder(config, &data))?;
        let p = out.join(LOSS_FILE);
        stage("train", write_atomic(&p, history.to_csv().as_bytes()))?;
        files.push(p);
        models.ocsvm = Some(stage("fit-occ", fit_occ_stage(config, &encoder, &data))?);
        models.encoder = Some(encoder);
    }
    if config.has_detector(DetectorKind::Helm) {
        models.helm = Some(stage("fit-helm", fit_helm_stage(config, &data))?);
    }
    let mut ckpt = Checkpoint::new();
    models.write_into(&mut ckpt);
    let p = out.join(CHECKPOINT_FILE);
    stage("fit-helm", ckpt.save(&p))?;
    files.push(p);

    let series = stage("score", score_stage(config, &models, &data))?;
    let p = out.join(HEALTH_FILE);
    stage("score", write_atomic(&p, health_csv(&series).as_bytes()))?;
    files.push(p);

    let detections = stage("detect", detect_stage(config, &series))?;
    let flat: Vec<&DetectionResult> = detections.iter().flat_map(|(_, r)| r).collect();
    let p = out.join(DETECTIONS_FILE);
    stage("detect", crate::io::write_json(&p, &flat))?;
    files.push(p);

    let report = stage("evaluate", evaluate_stage(config, &detections, &data))?;
    stage("evaluate", write_report(out, &report, &mut files))?;
    if config.plots {
        stage("evaluate", write_plots(config, out, &series, &data, &mut files))?;
    }
    Ok(RunOutput { report, files })
}

/// Two-step model (triplet encoder, then classifier on frozen features)
/// against a cross-entropy model of the same architecture.
fn run_toy(config: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    let data = stage("simulate", supervised_toy(&config.toy, config.seed))?;
    let normalise = |signals: &[Vec<f32>]| signals.iter().map(|s| standardize(s)).collect::<Result<Vec<_>>>();
    let train_x = stage("prep", normalise(&data.train_signals))?;
    let test_x = stage("prep", normalise(&data.test_signals))?;
    let enc_cfg = config.effective_encoder();
    let init = sub_seed(config.seed, Stream::EncoderInit);
    let mut files = Vec::new();

    let (encoder, head, history) = stage("train", (|| {
        let labels: Vec<PairLabel> = data.train_labels.iter().map(|&c| PairLabel::category(c)).collect();
        let mut encoder = build_supervised_encoder(&enc_cfg, &config.head, init)?;
        let train_spec = with_seed(&config.train, sub_seed(config.seed, Stream::EncoderTrain));
        let history = train_contrastive(&mut encoder, &train_x, &labels, &train_spec)?;
        let mut head = build_classifier_head(&config.head, sub_seed(config.seed, Stream::HeadInit))?;
        let head_spec = with_seed(&config.classifier, sub_seed(config.seed, Stream::HeadTrain));
        train_supervised_classifier(&encoder, &mut head, &train_x, &data.train_labels, &head_spec)?;
        Ok((encoder, head, history))
    })())?;
    let (ce_encoder, ce_head) = stage("train", (|| {
        let mut e = build_supervised_encoder(&enc_cfg, &config.head, sub_seed(config.seed, Stream::BaselineInit))?;
        let mut h = build_classifier_head(&config.head, sub_seed(config.seed, Stream::BaselineInit) ^ 1)?;
        let spec = with_seed(&config.train, sub_seed(config.seed, Stream::BaselineTrain));
        train_cross_entropy(&mut e, &mut h, &train_x, &data.train_labels, &spec)?;
        Ok((e, h))
    })())?;
    let p = out.join(LOSS_FILE);
    stage("train", write_atomic(&p, history.to_csv().as_bytes()))?;
    files.push(p);

    let mut ckpt = Checkpoint::new();
    ckpt.insert_network(ENCODER_SECTION, &encoder);
    ckpt.insert_network(HEAD_SECTION, &head);
    ckpt.insert_network(CE_ENCODER_SECTION, &ce_encoder);
    ckpt.insert_network(CE_HEAD_SECTION, &ce_head);
    let p = out.join(CHECKPOINT_FILE);
    stage("train", ckpt.save(&p))?;
    files.push(p);

    let classification = stage(
        "evaluate",
        [("contrastive", &encoder, &head), ("cross-entropy", &ce_encoder, &ce_head)]
            .into_iter()
            .map(|(name, e, h)| {
                let predicted = encode_batch(e, &test_x)?
                    .iter()
                    .map(|f| classify(h, f).map(|p| argmax(&p)))
                    .collect::<Result<Vec<_>>>()?;
                let confusion = ConfusionMatrix::from_predictions(&TOY_CATEGORIES, &data.test_labels, &predicted)?;
                Ok(ClassificationReport {
                    model: name.to_string(),
                    balanced_accuracy: confusion.balanced_accuracy().ok(),
                    confusion,
                })
            })
            .collect::<Result<Vec<_>>>(),
    )?;
    let report = EvalReport {
        classification,
        ..EvalReport::default()
    };
    stage("evaluate", write_report(out, &report, &mut files))?;
    Ok(RunOutput { report, files })
}

/// Runs the configured task and writes its artifacts to `out`. While the
/// run is in progress, and after a failure, `out` holds an `INCOMPLETE`
/// marker naming the failing stage.
pub fn run_pipeline(config: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    stage("config", config.validate())?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let marker = out.join(INCOMPLETE_MARKER);
    write_atomic(&marker, b"running\n")?;
    let result = match config.task {
        Task::WheelUnsupervised => run_wheel(config, out),
        Task::SupervisedToy => run_toy(config, out),
    };
    match &result {
        Ok(_) => fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?,
        Err(e) => {
            let note = format!("failed in stage {}: {e}\n", e.stage().unwrap_or("unknown"));
            // the original error matters more than a failed marker update
            let _ = write_atomic(&marker, note.as_bytes());
        }
    }
    result
}
