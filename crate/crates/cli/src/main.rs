//! Command-line front end. Each stage command reads the previous stage's
//! files from the output directory and writes its own; `run` does all of
//! them in one process.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use railfdd::checkpoint::Checkpoint;
use railfdd::config::{DetectorKind, ExperimentConfig};
use railfdd::detection::DetectionResult;
use railfdd::evaluation::health_svg;
use railfdd::io::prepared::{read_prepared, write_prepared};
use railfdd::io::{health_csv, parse_health_csv, read_json, write_atomic, write_json};
use railfdd::pipeline::{self as pl, Models};
use railfdd::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "railfdd", version, about = "Contrastive fault detection on wheel-load monitoring data")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write SVG health plots.
    #[arg(long, global = true)]
    plots: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the train and test fleets into <out>/dataset.
    Simulate,
    /// Prepare both splits into <out>/prepared.prp.
    Prep,
    /// Train the encoder on the training split.
    Train,
    /// Fit the one-class SVM on encoded training signals.
    FitOcc,
    /// Fit the HELM baseline on the training signals.
    FitHelm,
    /// Write health series of the test wheels.
    Score,
    /// Apply the detection rule to the health series.
    Detect,
    /// Score detections against ground truth.
    Evaluate,
    /// Full pipeline.
    Run,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Prep => "prep",
            Command::Train => "train",
            Command::FitOcc => "fit-occ",
            Command::FitHelm => "fit-helm",
            Command::Score => "score",
            Command::Detect => "detect",
            Command::Evaluate => "evaluate",
            Command::Run => "run",
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut config = match (&cli.config, cli.seed) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(seed)) => ExperimentConfig::with_seed(seed),
        (None, None) => return Err(Error::Config("a seed is required: pass --config or --seed".into())),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output_dir = out.clone();
    }
    config.plots |= cli.plots;
    Ok(config)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if path.exists() {
        Checkpoint::load(path)
    } else {
        Ok(Checkpoint::new())
    }
}

/// Detections as written by `detect`, regrouped per detector in file order.
fn group_detections(flat: Vec<DetectionResult>) -> Vec<(String, Vec<DetectionResult>)> {
    let mut out: Vec<(String, Vec<DetectionResult>)> = Vec::new();
    for d in flat {
        match out.iter_mut().find(|(n, _)| *n == d.detector) {
            Some((_, v)) => v.push(d),
            None => out.push((d.detector.clone(), vec![d])),
        }
    }
    out
}

fn execute(command: Command, config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    config.validate()?;
    let out = config.output_dir.as_path();
    if !matches!(command, Command::Run) {
        pl::require_wheel_task(config)?;
    }
    let prepared_path = out.join(pl::PREPARED_FILE);
    let ckpt_path = out.join(pl::CHECKPOINT_FILE);
    let mut files = Vec::new();
    match command {
        Command::Run => return Ok(pl::run_pipeline(config, out)?.files),
        Command::Simulate => {
            let dir = out.join(pl::DATASET_DIR);
            pl::simulate_to(config, &dir)?;
            files.push(dir);
        }
        Command::Prep => {
            let mut source = config.clone();
            let simulated = out.join(pl::DATASET_DIR);
            if source.dataset.is_none() && simulated.is_dir() {
                source.dataset = Some(simulated);
            }
            let (train, test, base) = pl::load_timelines(&source)?;
            let data = pl::prepare_timelines(&train, &test, base, config.effective_encoder().input_length)?;
            write_prepared(&prepared_path, &data)?;
            files.push(prepared_path);
        }
        Command::Train => {
            let data = read_prepared(&prepared_path)?;
            let (encoder, history) = pl::train_wheel_encoder(config, &data)?;
            let mut ckpt = load_checkpoint(&ckpt_path)?;
            ckpt.insert_network(pl::ENCODER_SECTION, &encoder);
            ckpt.save(&ckpt_path)?;
            let loss = out.join(pl::LOSS_FILE);
            write_atomic(&loss, history.to_csv().as_bytes())?;
            files.extend([ckpt_path, loss]);
        }
        Command::FitOcc => {
            let data = read_prepared(&prepared_path)?;
            let mut ckpt = load_checkpoint(&ckpt_path)?;
            let encoder = ckpt
                .network(pl::ENCODER_SECTION)
                .map_err(|_| Error::State("fit-occ needs a trained encoder; run `train` first".into()))?;
            let svm = pl::fit_occ_stage(config, &encoder, &data)?;
            ckpt.insert(railfdd::checkpoint::TAG_OCSVM, pl::OCSVM_SECTION, svm.to_bytes());
            ckpt.save(&ckpt_path)?;
            files.push(ckpt_path);
        }
        Command::FitHelm => {
            let data = read_prepared(&prepared_path)?;
            let mut ckpt = load_checkpoint(&ckpt_path)?;
            let helm = pl::fit_helm_stage(config, &data)?;
            ckpt.insert(railfdd::checkpoint::TAG_HELM, pl::HELM_SECTION, helm.to_bytes());
            ckpt.save(&ckpt_path)?;
            files.push(ckpt_path);
        }
        Command::Score => {
            let data = read_prepared(&prepared_path)?;
            let models = Models::from_checkpoint(&load_checkpoint(&ckpt_path)?)?;
            let series = pl::score_stage(config, &models, &data)?;
            let p = out.join(pl::HEALTH_FILE);
            write_atomic(&p, health_csv(&series).as_bytes())?;
            files.push(p);
        }
        Command::Detect => {
            let path = out.join(pl::HEALTH_FILE);
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let detections = pl::detect_stage(config, &parse_health_csv(&text)?)?;
            let flat: Vec<&DetectionResult> = detections.iter().flat_map(|(_, r)| r).collect();
            let p = out.join(pl::DETECTIONS_FILE);
            write_json(&p, &flat)?;
            files.push(p);
        }
        Command::Evaluate => {
            let data = read_prepared(&prepared_path)?;
            let flat: Vec<DetectionResult> = read_json(&out.join(pl::DETECTIONS_FILE))?;
            let report = pl::evaluate_stage(config, &group_detections(flat), &data)?;
            for (name, body) in [
                (pl::REPORT_JSON, format!("{}\n", report.to_json())),
                (pl::REPORT_TEXT, report.to_text()),
            ] {
                let p = out.join(name);
                write_atomic(&p, body.as_bytes())?;
                files.push(p);
            }
            if config.plots {
                let path = out.join(pl::HEALTH_FILE);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                for s in parse_health_csv(&text)? {
                    let threshold = DetectorKind::ALL
                        .into_iter()
                        .find(|k| k.name() == s.detector)
                        .and_then(|k| config.thresholds.for_detector(k))
                        .unwrap_or(f64::NAN);
                    let annotation = data.wheels.iter().find(|w| w.wheel_id == s.wheel_id).and_then(|w| w.annotation);
                    let svg = health_svg(std::slice::from_ref(&s), annotation.as_ref(), threshold, data.base_timestamp);
                    let p = out.join(pl::PLOTS_DIR).join(format!("{:05}-{}.svg", s.wheel_id, s.detector));
                    write_atomic(&p, svg.as_bytes())?;
                    files.push(p);
                }
            }
        }
    }
    Ok(files)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let command = cli.command;
    let result = load_config(&cli).and_then(|c| execute(command, &c).map_err(|e| e.in_stage(command.name())));
    match result {
        Ok(files) => {
            let line = serde_json::json!({
                "status": "ok",
                "command": command.name(),
                "outputs": files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            });
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({
                "status": "error",
                "command": command.name(),
                "kind": e.kind(),
                "stage": e.stage(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
