//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use railfdd::config::{DetectorKind, ExperimentConfig};
use railfdd::contrastive::{mine_semi_hard, PairLabel, Triplet, SECONDS_PER_DAY};
use railfdd::detection::DetectionResult;
use railfdd::encoders::{build_classifier_head, build_supervised_encoder, build_wheel_encoder, SupervisedHeadConfig, WheelEncoderConfig};
use railfdd::evaluation::{balanced_accuracy, build_report, delay_metrics, BinaryConfusion, EvalReport, WheelTruth, Zone, ZoneHistogram};
use railfdd::helm::{fit_helm_logged, ista_l1_solve, ridge_one_class, soft_threshold, HelmConfig};
use railfdd::nn::{grad_check, LayerSpec, Network, Tensor};
use railfdd::occ::{fit_ocsvm, Gamma, OcSvmConfig};
use railfdd::pipeline::run_pipeline;
use railfdd::sim::{FaultKind, ZoneAnnotation};

const WHEEL_CONFIG: &str = include_str!("../../../configs/wheel.json");
const TOY_CONFIG: &str = include_str!("../../../configs/toy.json");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn criterion_gradients() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let small = WheelEncoderConfig {
        input_length: 64,
        ..WheelEncoderConfig::default()
    };
    let head = SupervisedHeadConfig::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c);
        let every_kind = Network::<f32>::build(
            vec![2, 12],
            &[
                LayerSpec::conv1d(2, 3, 5, 2),
                LayerSpec::LeakyRelu { slope: 0.1 },
                LayerSpec::conv1d(3, 2, 3, 1),
                LayerSpec::Relu,
                LayerSpec::dense(12, 4),
                LayerSpec::Softmax,
            ],
            seed,
        )
        .map_err(|e| e.to_string())?;
        let cases: Vec<(&str, Network<f32>)> = vec![
            ("all layer kinds", every_kind),
            ("wheel encoder", build_wheel_encoder(&small, seed).map_err(|e| e.to_string())?),
            ("supervised encoder", build_supervised_encoder(&small, &head, seed).map_err(|e| e.to_string())?),
            ("classifier head", build_classifier_head(&head, seed).map_err(|e| e.to_string())?),
        ];
        for (name, net) in cases {
            let len: usize = net.input_shape().iter().product();
            let x = Tensor::new(net.input_shape().to_vec(), (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .map_err(|e| e.to_string())?;
            let report = grad_check(&net, &x, 1e-6, TOL).map_err(|e| e.to_string())?;
            worst = worst.max(report.max_relative_error);
            checked += report.checked();
            if !report.passed() {
                return Err(format!("seed {seed}, {name}: flagged {:?}", report.flagged()));
            }
        }
    }
    let elapsed = start.elapsed();
    check(
        worst < TOL && elapsed < Duration::from_secs(120),
        format!("max relative error {worst:.2e} over {checked} entries, {elapsed:.1?}"),
    )
}

// ---------------------------------------------------------------- 2

fn rbf_gram(x: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    x.iter()
        .map(|a| {
            x.iter()
                .map(|b| (-gamma * a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()).exp())
                .collect()
        })
        .collect()
}

/// Euclidean projection onto `{0 <= a <= c, sum a = 1}` by bisection on the shift.
fn project_capped_simplex(v: &[f64], c: f64) -> Vec<f64> {
    let mass = |tau: f64| v.iter().map(|x| (x - tau).clamp(0.0, c)).sum::<f64>();
    let (mut lo, mut hi) = (v.iter().cloned().fold(f64::INFINITY, f64::min) - c - 1.0, v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let tau = 0.5 * (lo + hi);
    v.iter().map(|x| (x - tau).clamp(0.0, c)).collect()
}

/// Projected-gradient solution of the one-class dual; returns decision values
/// at `queries`.
fn ocsvm_oracle(x: &[Vec<f64>], nu: f64, gamma: f64, queries: &[Vec<f64>]) -> Vec<f64> {
    let n = x.len();
    let k = rbf_gram(x, gamma);
    let c = 1.0 / (nu * n as f64);
    // Gershgorin bound on the largest eigenvalue.
    let lipschitz = k.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let step = 1.0 / lipschitz;
    let gradient = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| (0..n).map(|j| k[i][j] * v[j]).sum()).collect() };
    // Accelerated projected gradient.
    let mut a = project_capped_simplex(&vec![1.0 / n as f64; n], c);
    let mut y = a.clone();
    let mut t = 1.0f64;
    for _ in 0..200_000 {
        let g = gradient(&y);
        let v: Vec<f64> = y.iter().zip(&g).map(|(yi, gi)| yi - step * gi).collect();
        let next = project_capped_simplex(&v, c);
        let moved = next.iter().zip(&a).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = next.iter().zip(&a).map(|(p, q)| p + (t - 1.0) / t_next * (p - q)).collect();
        a = next;
        t = t_next;
        if moved < 1e-14 {
            break;
        }
    }
    let g: Vec<f64> = (0..n).map(|i| (0..n).map(|j| k[i][j] * a[j]).sum()).collect();
    let eps = 1e-9 * c;
    let free: Vec<f64> = (0..n).filter(|&i| a[i] > eps && a[i] < c - eps).map(|i| g[i]).collect();
    let rho = if free.is_empty() {
        let upper = (0..n).filter(|&i| a[i] < c - eps).map(|i| g[i]).fold(f64::INFINITY, f64::min);
        let lower = (0..n).filter(|&i| a[i] > eps).map(|i| g[i]).fold(f64::NEG_INFINITY, f64::max);
        0.5 * (upper + lower)
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    queries
        .iter()
        .map(|q| {
            x.iter()
                .zip(&a)
                .map(|(xi, ai)| ai * (-gamma * xi.iter().zip(q).map(|(p, r)| (p - r) * (p - r)).sum::<f64>()).exp())
                .sum::<f64>()
                - rho
        })
        .collect()
}

fn cloud(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
}

fn criterion_ocsvm() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for instance in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        let n = rng.random_range(5..=20);
        let x = cloud(&mut rng, n, 2);
        let nu = rng.random_range(0.1..0.9);
        let gamma = rng.random_range(0.2..2.0);
        let config = OcSvmConfig {
            nu,
            gamma: Gamma::Fixed(gamma),
            tolerance: 1e-10,
            ..OcSvmConfig::default()
        };
        let model = fit_ocsvm(&x, &config).map_err(|e| e.to_string())?;
        let mut queries = x.clone();
        queries.extend(cloud(&mut rng, 10, 2));
        let expected = ocsvm_oracle(&x, nu, gamma, &queries);
        for (q, e) in queries.iter().zip(&expected) {
            let got = model.decision(q).map_err(|e| e.to_string())?;
            worst = worst.max((got - e).abs());
        }
    }
    let mut worst_excess = f64::NEG_INFINITY;
    for fit in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + fit);
        let n = rng.random_range(20..=120);
        let d = rng.random_range(2..=4);
        let x = cloud(&mut rng, n, d);
        let nu = rng.random_range(0.02..0.5);
        let config = OcSvmConfig {
            nu,
            tolerance: 1e-10,
            ..OcSvmConfig::default()
        };
        let model = fit_ocsvm(&x, &config).map_err(|e| e.to_string())?;
        let mut outliers = 0;
        for p in &x {
            if model.decision(p).map_err(|e| e.to_string())? < -1e-6 {
                outliers += 1;
            }
        }
        worst_excess = worst_excess.max(outliers as f64 / n as f64 - nu);
    }
    let elapsed = start.elapsed();
    check(
        worst < 1e-4 && worst_excess <= 0.0 && elapsed < Duration::from_secs(120),
        format!(
            "max |decision - oracle| {worst:.2e} over 50 instances; max outlier fraction - nu {worst_excess:.3} over 100 fits; {elapsed:.1?}"
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Every (anchor, positive, negative) triple is scored; per anchor-positive
/// pair the lexicographically smallest (not semi-hard, d_an, index) wins.
fn mine_exhaustive(x: &[Vec<f64>], labels: &[u64], margin: f64) -> Vec<Triplet> {
    let dist = |i: usize, j: usize| x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut best: BTreeMap<(usize, usize), (bool, f64, usize)> = BTreeMap::new();
    let n = x.len();
    for a in 0..n {
        for p in 0..n {
            for neg in 0..n {
                if a == p || labels[a] != labels[p] || labels[neg] == labels[a] {
                    continue;
                }
                let (d_ap, d_an) = (dist(a, p), dist(a, neg));
                let key = (!(d_an > d_ap && d_an < d_ap + margin), d_an, neg);
                let slot = best.entry((a, p)).or_insert(key);
                if (key.0, key.1) < (slot.0, slot.1) {
                    *slot = key;
                }
            }
        }
    }
    best.into_iter()
        .map(|((anchor, positive), (_, _, negative))| Triplet { anchor, positive, negative })
        .collect()
}

fn criterion_mining() -> Outcome {
    let mut total = 0;
    for batch in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(7000 + batch);
        let n = rng.random_range(2..=64);
        let groups = rng.random_range(1..=6u64);
        let d = rng.random_range(1..=4);
        // Integer coordinates on even batches give exact distance ties.
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| if batch % 2 == 0 { rng.random_range(-3i32..=3) as f64 } else { rng.random_range(-1.0..1.0) })
                    .collect()
            })
            .collect();
        let labels: Vec<u64> = (0..n).map(|_| rng.random_range(0..groups)).collect();
        let margin = rng.random_range(0.05..2.0);
        let pair: Vec<PairLabel> = labels.iter().map(|&l| PairLabel::category(l as usize)).collect();
        let got = mine_semi_hard(&x, &pair, margin).map_err(|e| e.to_string())?;
        let expected = mine_exhaustive(&x, &labels, margin);
        if got != expected {
            return Err(format!("batch {batch}: {} triplets mined, {} expected", got.len(), expected.len()));
        }
        total += got.len();
    }
    Ok(format!("200 batches identical, {total} triplets"))
}

// ---------------------------------------------------------------- 4

const BASE: u64 = 1_577_836_800;

fn at_day(wheel: u32, day: u64) -> DetectionResult {
    DetectionResult::flagged_at(wheel, "d", BASE + day * SECONDS_PER_DAY + 7200)
}

fn criterion_metrics() -> Outcome {
    let round3 = |v: f64| (v * 1000.0).round() / 1000.0;
    let a = balanced_accuracy(&BinaryConfusion { tp: 63, fn_: 16, tn: 15, fp: 1 }).map_err(|e| e.to_string())?;
    let b = balanced_accuracy(&BinaryConfusion { tp: 71, fn_: 8, tn: 14, fp: 2 }).map_err(|e| e.to_string())?;
    if round3(a) != 0.867 || round3(b) != 0.887 {
        return Err(format!("balanced accuracies {a:.4} and {b:.4}"));
    }

    // (onset, manifest, end, detection day or None, zone, dt, dr)
    type Case = (u32, u32, u32, Option<u64>, Zone, Option<i64>, Option<f64>);
    let cases: [Case; 9] = [
        (50, 100, 140, Some(10), Zone::Green, Some(-40), None),
        (50, 100, 140, Some(49), Zone::Green, Some(-1), None),
        (50, 100, 140, Some(50), Zone::Orange, Some(0), None),
        (50, 100, 140, Some(75), Zone::Orange, Some(0), None),
        (50, 100, 140, Some(100), Zone::Orange, Some(0), None),
        (50, 100, 140, Some(101), Zone::Red, Some(1), Some(1.0 / 40.0)),
        (50, 100, 140, Some(120), Zone::Red, Some(20), Some(0.5)),
        (50, 100, 140, Some(140), Zone::Red, Some(40), Some(1.0)),
        (50, 100, 140, None, Zone::Missed, None, None),
    ];
    for (i, &(onset, manifest, end, day, zone, dt, dr)) in cases.iter().enumerate() {
        let ann = ZoneAnnotation::new(onset, manifest, end).map_err(|e| e.to_string())?;
        let det = day.map_or_else(|| DetectionResult::not_flagged(1, "d"), |d| at_day(1, d));
        let m = delay_metrics(&det, &ann, BASE).map_err(|e| e.to_string())?;
        if (m.zone, m.dt, m.dr) != (zone, dt, dr) {
            return Err(format!("delay case {i}: got {:?}", (m.zone, m.dt, m.dr)));
        }
    }
    let ann = ZoneAnnotation::new(50, 100, 140).map_err(|e| e.to_string())?;
    if delay_metrics(&at_day(1, 141), &ann, BASE).is_ok() {
        return Err("a detection after the monitoring end was accepted".into());
    }

    let truth: Vec<WheelTruth> = (1..=4)
        .map(|id| WheelTruth {
            wheel_id: id,
            fault: (id < 4).then_some(FaultKind::Shelling),
            annotation: (id < 4).then_some(ann),
        })
        .collect();
    let results = vec![at_day(1, 30), at_day(2, 80), at_day(3, 139), DetectionResult::not_flagged(4, "d")];
    let report = build_report(&[("d".into(), results)], &truth, BASE).map_err(|e| e.to_string())?;
    let d = &report.detectors[0];
    check(
        d.overall.zones == ZoneHistogram { green: 1, orange: 1, red: 1 } && d.overall.dr_buckets.above_0_5 == 1,
        format!("balanced accuracies {:.3} and {:.3}; {} delay scenarios exact", a, b, cases.len() + 2),
    )
}

// ---------------------------------------------------------------- 5, 6, 7

fn run(config_text: &str, dir: &Path) -> Result<(EvalReport, Duration), String> {
    let config = ExperimentConfig::from_json(config_text).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let out = run_pipeline(&config, dir).map_err(|e| e.to_string())?;
    Ok((out.report, start.elapsed()))
}

fn scratch() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| tempfile::tempdir().expect("temporary directory")).path()
}

fn first_wheel_run() -> &'static Result<(EvalReport, Duration), String> {
    static RUN: OnceLock<Result<(EvalReport, Duration), String>> = OnceLock::new();
    RUN.get_or_init(|| run(WHEEL_CONFIG, &scratch().join("wheel-a")))
}

fn first_toy_run() -> &'static Result<(EvalReport, Duration), String> {
    static RUN: OnceLock<Result<(EvalReport, Duration), String>> = OnceLock::new();
    RUN.get_or_init(|| run(TOY_CONFIG, &scratch().join("toy-a")))
}

fn criterion_wheel_experiment() -> Outcome {
    let (report, elapsed) = first_wheel_run().clone()?;
    let det = |kind: DetectorKind| report.detector(kind.name()).ok_or(format!("no {} report", kind.name()));
    let contrastive = det(DetectorKind::ContrastiveOcsvm)?;
    let dyncoeff = det(DetectorKind::Dyncoeff)?;
    let helm = det(DetectorKind::Helm)?;
    let ensemble = det(DetectorKind::Ensemble)?;
    let ba = contrastive.balanced_accuracy.unwrap_or(f64::NAN);
    let ba_dyn = dyncoeff.balanced_accuracy.unwrap_or(f64::NAN);
    let member_recall = contrastive.recall.unwrap_or(0.0).max(helm.recall.unwrap_or(0.0));
    let ens_recall = ensemble.recall.unwrap_or(f64::NAN);
    let shelling = contrastive.by_fault.get("shelling").cloned().unwrap_or_default();
    let early = shelling.zones.green + shelling.zones.orange;
    let a = ba >= 0.85;
    let b = ba > ba_dyn;
    let c = ens_recall >= member_recall;
    let d = shelling.detected > 0 && 2 * early >= shelling.detected;
    check(
        a && b && c && d,
        format!(
            "(a) BA {ba:.3} (b) dyncoeff BA {ba_dyn:.3} (c) ensemble recall {ens_recall:.3} vs members {member_recall:.3} \
             (d) shelling early {early}/{}; helm BA {:.3}; {elapsed:.1?}",
            shelling.detected,
            helm.balanced_accuracy.unwrap_or(f64::NAN)
        ),
    )
}

fn criterion_toy() -> Outcome {
    let (report, elapsed) = first_toy_run().clone()?;
    let ba = |name: &str| {
        report
            .classification
            .iter()
            .find(|c| c.model == name)
            .and_then(|c| c.balanced_accuracy)
            .unwrap_or(f64::NAN)
    };
    let (contrastive, ce) = (ba("contrastive"), ba("cross-entropy"));
    check(
        contrastive >= 0.90,
        format!("contrastive BA {contrastive:.3}; cross-entropy BA {ce:.3} (informational); {elapsed:.1?}"),
    )
}

fn criterion_determinism() -> Outcome {
    let mut notes = Vec::new();
    for (name, text, first) in [("wheel", WHEEL_CONFIG, first_wheel_run()), ("toy", TOY_CONFIG, first_toy_run())] {
        let (a, _) = first.clone()?;
        let (b, _) = run(text, &scratch().join(format!("{name}-b")))?;
        if a.to_json() != b.to_json() {
            return Err(format!("{name} reports differ between runs"));
        }
        notes.push(format!("{name} report identical"));
    }
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------- 8

fn criterion_solvers() -> Outcome {
    let mut worst = 0.0f64;
    // Orthonormal design: the solution is the soft-thresholded projection.
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let m = DMatrix::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let q = m.qr().q();
        let h = q.columns(0, 3).into_owned();
        let x = DMatrix::from_fn(6, 2, |_, _| rng.random_range(-2.0..2.0));
        let lambda = rng.random_range(0.01..0.5);
        let r = ista_l1_solve(&h, &x, lambda, 10_000, 1e-16).map_err(|e| e.to_string())?;
        let expected = (h.transpose() * &x).map(|v| soft_threshold(v, lambda));
        worst = worst.max((r.beta - expected).amax());
    }
    // 3x2 ridge system solved by hand with Cramer's rule.
    let h = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 0.5, -1.0, 3.0, 0.25]);
    let c = 0.3;
    let (a11, a12, a22) = (1.0 + 0.25 + 9.0 + c, 2.0 - 0.5 + 0.75, 4.0 + 1.0 + 0.0625 + c);
    let (b1, b2) = (1.0 + 0.5 + 3.0, 2.0 - 1.0 + 0.25);
    let det = a11 * a22 - a12 * a12;
    let expected = [(b1 * a22 - a12 * b2) / det, (a11 * b2 - a12 * b1) / det];
    let w = ridge_one_class(&h, c).map_err(|e| e.to_string())?;
    worst = worst.max((w[0] - expected[0]).abs()).max((w[1] - expected[1]).abs());

    let mut runs = 0;
    let mut monotone = true;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let h = DMatrix::from_fn(30, 8, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(30, 4, |_, _| rng.random_range(-1.0..1.0));
        let r = ista_l1_solve(&h, &x, 0.05, 3000, 1e-14).map_err(|e| e.to_string())?;
        monotone &= r.objectives.windows(2).all(|w| w[1] <= w[0]);
        runs += 1;
    }
    let signals: Vec<Vec<f32>> = (0..150)
        .map(|i| (0..64).map(|j| 1.0 + 0.05 * ((i * 7 + j) as f32 * 0.3).sin()).collect())
        .collect();
    let (_, traces) = fit_helm_logged(&signals, &HelmConfig::default(), 17).map_err(|e| e.to_string())?;
    for t in &traces {
        monotone &= t.windows(2).all(|w| w[1] <= w[0]);
        runs += 1;
    }
    check(
        worst < 1e-6 && monotone,
        format!("max closed-form deviation {worst:.2e}; objective monotone on {runs} logged runs: {monotone}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient correctness", criterion_gradients),
        ("2 OC-SVM oracle and nu-property", criterion_ocsvm),
        ("3 semi-hard mining equivalence", criterion_mining),
        ("4 metric fidelity", criterion_metrics),
        ("5 end-to-end wheel experiment", criterion_wheel_experiment),
        ("6 supervised toy task", criterion_toy),
        ("7 determinism", criterion_determinism),
        ("8 ISTA and ridge solvers", criterion_solvers),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("criterion {name}: PASS ({detail})"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail})");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
