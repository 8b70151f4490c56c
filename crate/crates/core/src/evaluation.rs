//! Detection delay, balanced accuracy, confusion matrices, and report assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Serialize, Serializer};

use crate::contrastive::SECONDS_PER_DAY;
use crate::detection::{DetectionResult, HealthSeries};
use crate::error::{Error, Result};
use crate::sim::{FaultKind, ZoneAnnotation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Zone {
    Green,
    Orange,
    Red,
    Missed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DelayMetrics {
    pub wheel_id: u32,
    pub zone: Zone,
    /// Signed days; absent when missed.
    pub dt: Option<i64>,
    /// Red-zone delay over the red-zone length.
    pub dr: Option<f64>,
}

/// Whole days from `base` to `timestamp`, rounded towards negative infinity.
pub fn day_index(timestamp: u64, base: u64) -> i64 {
    (timestamp as i64 - base as i64).div_euclid(SECONDS_PER_DAY as i64)
}

/// Zone and delay of a detection. The manifestation day itself counts as
/// orange, so `dt > 0` exactly for red detections.
pub fn delay_metrics(detection: &DetectionResult, annotation: &ZoneAnnotation, base_timestamp: u64) -> Result<DelayMetrics> {
    let Some(ts) = detection.detection_timestamp.filter(|_| detection.flagged) else {
        return Ok(DelayMetrics {
            wheel_id: detection.wheel_id,
            zone: Zone::Missed,
            dt: None,
            dr: None,
        });
    };
    let day = day_index(ts, base_timestamp);
    let onset = annotation.onset_day as i64;
    let manifest = annotation.manifest_day as i64;
    let (zone, dt, dr) = if day < onset {
        (Zone::Green, day - onset, None)
    } else if day <= manifest {
        (Zone::Orange, 0, None)
    } else {
        let dt = day - manifest;
        let total = annotation.monitoring_end_day as i64 - manifest;
        if dt > total {
            return Err(Error::Data(format!(
                "wheel {}: detection on day {day} is after the monitoring end {}",
                detection.wheel_id, annotation.monitoring_end_day
            )));
        }
        (Zone::Red, dt, Some(dt as f64 / total as f64))
    };
    Ok(DelayMetrics {
        wheel_id: detection.wheel_id,
        zone,
        dt: Some(dt),
        dr,
    })
}

/// Defect-versus-healthy counts; "positive" is defective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct BinaryConfusion {
    pub tp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl BinaryConfusion {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }

    pub fn recall(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }
}

pub fn balanced_accuracy(c: &BinaryConfusion) -> Result<f64> {
    let p = c.tp + c.fn_;
    let n = c.tn + c.fp;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "balanced accuracy needs both categories ({p} defective, {n} healthy)"
        )));
    }
    Ok(0.5 * (c.tp as f64 / p as f64 + c.tn as f64 / n as f64))
}

/// Rows are actual categories, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub categories: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn from_predictions(categories: &[&str], actual: &[usize], predicted: &[usize]) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::Dimension(format!(
                "{} labels but {} predictions",
                actual.len(),
                predicted.len()
            )));
        }
        let k = categories.len();
        let mut counts = vec![vec![0; k]; k];
        for (&a, &p) in actual.iter().zip(predicted) {
            if a >= k || p >= k {
                return Err(Error::Data(format!("category index out of range ({a}, {p}) for {k} categories")));
            }
            counts[a][p] += 1;
        }
        Ok(Self {
            categories: categories.iter().map(|s| s.to_string()).collect(),
            counts,
        })
    }

    /// Mean per-category recall.
    pub fn balanced_accuracy(&self) -> Result<f64> {
        let mut sum = 0.0;
        for (i, row) in self.counts.iter().enumerate() {
            let total: usize = row.iter().sum();
            if total == 0 {
                return Err(Error::UndefinedMetric(format!(
                    "category {} has no samples",
                    self.categories[i]
                )));
            }
            sum += row[i] as f64 / total as f64;
        }
        Ok(sum / self.counts.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ZoneHistogram {
    pub green: usize,
    pub orange: usize,
    pub red: usize,
}

/// Red-zone detections by relative delay: `dr < 0.1`, `0.1 <= dr <= 0.5`,
/// `dr > 0.5`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DrBuckets {
    pub below_0_1: usize,
    pub up_to_0_5: usize,
    pub above_0_5: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FaultBreakdown {
    pub wheels: usize,
    pub detected: usize,
    pub zones: ZoneHistogram,
    pub dr_buckets: DrBuckets,
}

impl FaultBreakdown {
    fn add(&mut self, d: &DelayMetrics) {
        self.wheels += 1;
        match d.zone {
            Zone::Missed => return,
            Zone::Green => self.zones.green += 1,
            Zone::Orange => self.zones.orange += 1,
            Zone::Red => self.zones.red += 1,
        }
        self.detected += 1;
        if let Some(dr) = d.dr {
            if dr < 0.1 {
                self.dr_buckets.below_0_1 += 1;
            } else if dr <= 0.5 {
                self.dr_buckets.up_to_0_5 += 1;
            } else {
                self.dr_buckets.above_0_5 += 1;
            }
        }
    }
}

fn metric<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) => s.serialize_f64(*x),
        None => s.serialize_str("n/a"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DetectorReport {
    pub detector: String,
    pub confusion: BinaryConfusion,
    #[serde(serialize_with = "metric")]
    pub balanced_accuracy: Option<f64>,
    #[serde(serialize_with = "metric")]
    pub recall: Option<f64>,
    /// Over all defective wheels.
    pub overall: FaultBreakdown,
    pub by_fault: BTreeMap<String, FaultBreakdown>,
    pub delays: Vec<DelayMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub model: String,
    pub confusion: ConfusionMatrix,
    #[serde(serialize_with = "metric")]
    pub balanced_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub detectors: Vec<DetectorReport>,
    /// Name of the detector that ORs the others, if any.
    pub ensemble: Option<String>,
    pub classification: Vec<ClassificationReport>,
}

/// Ground truth of one wheel.
#[derive(Debug, Clone, PartialEq)]
pub struct WheelTruth {
    pub wheel_id: u32,
    pub fault: Option<FaultKind>,
    pub annotation: Option<ZoneAnnotation>,
}

/// Scores every detector against the same wheel set. `detections` maps
/// detector name to one result per wheel.
pub fn build_report(
    detections: &[(String, Vec<DetectionResult>)],
    truth: &[WheelTruth],
    base_timestamp: u64,
) -> Result<EvalReport> {
    let by_id: BTreeMap<u32, &WheelTruth> = truth.iter().map(|t| (t.wheel_id, t)).collect();
    let mut detectors = Vec::with_capacity(detections.len());
    for (name, results) in detections {
        let mut seen = std::collections::BTreeSet::new();
        let mut confusion = BinaryConfusion::default();
        let mut overall = FaultBreakdown::default();
        let mut by_fault: BTreeMap<String, FaultBreakdown> = BTreeMap::new();
        let mut delays = Vec::new();
        for r in results {
            let t = by_id.get(&r.wheel_id).ok_or_else(|| {
                Error::Data(format!("detector {name}: wheel {} has no ground truth", r.wheel_id))
            })?;
            if !seen.insert(r.wheel_id) {
                return Err(Error::Data(format!("detector {name}: wheel {} reported twice", r.wheel_id)));
            }
            match (t.fault, t.annotation) {
                (Some(kind), Some(a)) => {
                    if r.flagged {
                        confusion.tp += 1;
                    } else {
                        confusion.fn_ += 1;
                    }
                    let d = delay_metrics(r, &a, base_timestamp)?;
                    overall.add(&d);
                    by_fault.entry(kind.name().to_string()).or_default().add(&d);
                    delays.push(d);
                }
                (None, _) => {
                    if r.flagged {
                        confusion.fp += 1;
                    } else {
                        confusion.tn += 1;
                    }
                }
                (Some(_), None) => {
                    return Err(Error::Data(format!("wheel {} is defective but has no zone annotation", r.wheel_id)));
                }
            }
        }
        if seen.len() != truth.len() {
            return Err(Error::Data(format!(
                "detector {name} covers {} of {} wheels",
                seen.len(),
                truth.len()
            )));
        }
        detectors.push(DetectorReport {
            detector: name.clone(),
            balanced_accuracy: balanced_accuracy(&confusion).ok(),
            recall: confusion.recall(),
            confusion,
            overall,
            by_fault,
            delays,
        });
    }
    Ok(EvalReport {
        detectors,
        ensemble: None,
        classification: Vec::new(),
    })
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or("n/a".to_string(), |x| format!("{:.1}%", 100.0 * x))
}

impl EvalReport {
    pub fn detector(&self, name: &str) -> Option<&DetectorReport> {
        self.detectors.iter().find(|d| d.detector == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }

    /// Fixed-width summary: one block of detection counts per detector, then
    /// zone and relative-delay counts, then classification matrices.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.detectors.is_empty() {
            writeln!(out, "Detection").unwrap();
            writeln!(out, "{:<22}{:>6}{:>6}{:>6}{:>6}{:>10}", "detector", "TP", "FN", "TN", "FP", "BA").unwrap();
            for d in &self.detectors {
                let c = d.confusion;
                writeln!(
                    out,
                    "{:<22}{:>6}{:>6}{:>6}{:>6}{:>10}",
                    d.detector,
                    c.tp,
                    c.fn_,
                    c.tn,
                    c.fp,
                    fmt_metric(d.balanced_accuracy)
                )
                .unwrap();
            }
            writeln!(out).unwrap();
            writeln!(out, "Detection time").unwrap();
            writeln!(
                out,
                "{:<22}{:<10}{:>7}{:>7}{:>7}{:>7}{:>9}{:>9}{:>9}",
                "detector", "fault", "found", "green", "orange", "red", "dr<0.1", "dr<=0.5", "dr>0.5"
            )
            .unwrap();
            for d in &self.detectors {
                let rows = d.by_fault.iter().map(|(k, v)| (k.as_str(), v)).chain([("all", &d.overall)]);
                for (fault, b) in rows {
                    writeln!(
                        out,
                        "{:<22}{:<10}{:>7}{:>7}{:>7}{:>7}{:>9}{:>9}{:>9}",
                        d.detector,
                        fault,
                        format!("{}/{}", b.detected, b.wheels),
                        b.zones.green,
                        b.zones.orange,
                        b.zones.red,
                        b.dr_buckets.below_0_1,
                        b.dr_buckets.up_to_0_5,
                        b.dr_buckets.above_0_5
                    )
                    .unwrap();
                }
            }
        }
        for c in &self.classification {
            writeln!(out).unwrap();
            writeln!(out, "Classification: {} (BA {})", c.model, fmt_metric(c.balanced_accuracy)).unwrap();
            write!(out, "{:<12}", "actual\\pred").unwrap();
            for name in &c.confusion.categories {
                write!(out, "{name:>10}").unwrap();
            }
            writeln!(out).unwrap();
            for (name, row) in c.confusion.categories.iter().zip(&c.confusion.counts) {
                write!(out, "{name:<12}").unwrap();
                for v in row {
                    write!(out, "{v:>10}").unwrap();
                }
                writeln!(out).unwrap();
            }
        }
        out
    }
}

/// Line plot of one wheel's health series with the fault zones shaded and
/// the threshold drawn.
pub fn health_svg(series: &[HealthSeries], annotation: Option<&ZoneAnnotation>, threshold: f64, base_timestamp: u64) -> String {
    const W: f64 = 800.0;
    const H: f64 = 300.0;
    let days = |t: u64| (t as f64 - base_timestamp as f64) / SECONDS_PER_DAY as f64;
    let points = series.iter().flat_map(|s| &s.points);
    let (mut x0, mut x1, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, threshold);
    for p in points {
        x0 = x0.min(days(p.timestamp));
        x1 = x1.max(days(p.timestamp));
        y1 = y1.max(p.value);
    }
    if let Some(a) = annotation {
        x1 = x1.max(a.monitoring_end_day as f64);
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
    }
    let span = (x1 - x0).max(1.0);
    let sx = |d: f64| (d - x0) / span * W;
    let sy = |v: f64| H - (v.max(0.0) / (1.1 * y1)) * H;
    let mut svg = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    if let Some(a) = annotation {
        for (from, to, colour) in [
            (a.onset_day, a.manifest_day, "#ffd59e"),
            (a.manifest_day, a.monitoring_end_day, "#f4a6a6"),
        ] {
            let (l, r) = (sx(from as f64), sx(to as f64));
            write!(svg, r#"<rect x="{l:.1}" y="0" width="{:.1}" height="{H}" fill="{colour}"/>"#, (r - l).max(0.0)).unwrap();
        }
    }
    let ty = sy(threshold);
    write!(svg, r#"<line x1="0" y1="{ty:.1}" x2="{W}" y2="{ty:.1}" stroke="black" stroke-dasharray="4"/>"#).unwrap();
    let colours = ["#1f77b4", "#2ca02c", "#9467bd", "#8c564b"];
    for (s, colour) in series.iter().zip(colours.iter().cycle()) {
        let path: Vec<String> = s
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", sx(days(p.timestamp)), sy(p.value)))
            .collect();
        write!(
            svg,
            r#"<polyline fill="none" stroke="{colour}" stroke-width="1" points="{}"><title>{}</title></polyline>"#,
            path.join(" "),
            s.detector
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: u64 = 1_000_000;

    fn at_day(wheel: u32, day: u64) -> DetectionResult {
        DetectionResult::flagged_at(wheel, "d", BASE + day * SECONDS_PER_DAY + 3600)
    }

    #[test]
    fn delay_examples() {
        let a = ZoneAnnotation::new(50, 100, 140).unwrap();
        let g = delay_metrics(&at_day(1, 47), &a, BASE).unwrap();
        assert_eq!((g.zone, g.dt, g.dr), (Zone::Green, Some(-3), None));
        let o = delay_metrics(&at_day(1, 70), &a, BASE).unwrap();
        assert_eq!((o.zone, o.dt), (Zone::Orange, Some(0)));
        let r = delay_metrics(&at_day(1, 110), &a, BASE).unwrap();
        assert_eq!((r.zone, r.dt, r.dr), (Zone::Red, Some(10), Some(0.25)));
        let m = delay_metrics(&DetectionResult::not_flagged(1, "d"), &a, BASE).unwrap();
        assert_eq!((m.zone, m.dt), (Zone::Missed, None));
    }

    #[test]
    fn zone_boundaries() {
        let a = ZoneAnnotation::new(50, 100, 140).unwrap();
        assert_eq!(delay_metrics(&at_day(1, 49), &a, BASE).unwrap().zone, Zone::Green);
        assert_eq!(delay_metrics(&at_day(1, 50), &a, BASE).unwrap().zone, Zone::Orange);
        assert_eq!(delay_metrics(&at_day(1, 100), &a, BASE).unwrap().zone, Zone::Orange);
        let r = delay_metrics(&at_day(1, 101), &a, BASE).unwrap();
        assert_eq!((r.zone, r.dt), (Zone::Red, Some(1)));
        assert_eq!(delay_metrics(&at_day(1, 140), &a, BASE).unwrap().dr, Some(1.0));
        assert!(delay_metrics(&at_day(1, 141), &a, BASE).is_err());
    }

    #[test]
    fn balanced_accuracy_examples() {
        let perfect = BinaryConfusion { tp: 5, fn_: 0, tn: 5, fp: 0 };
        assert_eq!(balanced_accuracy(&perfect).unwrap(), 1.0);
        let empty = BinaryConfusion { tp: 0, fn_: 0, tn: 5, fp: 0 };
        assert!(matches!(balanced_accuracy(&empty), Err(Error::UndefinedMetric(_))));
    }

    fn truth() -> Vec<WheelTruth> {
        let a = Some(ZoneAnnotation::new(50, 100, 140).unwrap());
        vec![
            WheelTruth { wheel_id: 1, fault: Some(FaultKind::Shelling), annotation: a },
            WheelTruth { wheel_id: 2, fault: Some(FaultKind::Shelling), annotation: a },
            WheelTruth { wheel_id: 3, fault: Some(FaultKind::Crack), annotation: a },
            WheelTruth { wheel_id: 4, fault: None, annotation: None },
        ]
    }

    #[test]
    fn three_zone_scenario() {
        let results = vec![at_day(1, 40), at_day(2, 60), at_day(3, 130), DetectionResult::not_flagged(4, "d")];
        let r = build_report(&[("d".into(), results)], &truth(), BASE).unwrap();
        let d = &r.detectors[0];
        assert_eq!(d.overall.zones, ZoneHistogram { green: 1, orange: 1, red: 1 });
        assert_eq!(d.overall.dr_buckets, DrBuckets { below_0_1: 0, up_to_0_5: 0, above_0_5: 1 });
        assert_eq!(d.confusion, BinaryConfusion { tp: 3, fn_: 0, tn: 1, fp: 0 });
        assert_eq!(d.confusion.total(), 4);
        assert_eq!(d.balanced_accuracy, Some(1.0));
        assert_eq!(d.by_fault["shelling"].detected, 2);
    }

    #[test]
    fn all_healthy_fleet_marks_metric_unavailable() {
        let t: Vec<WheelTruth> = (0..3).map(|i| WheelTruth { wheel_id: i, fault: None, annotation: None }).collect();
        let results = (0..3).map(|i| DetectionResult::not_flagged(i, "d")).collect();
        let r = build_report(&[("d".into(), results)], &t, BASE).unwrap();
        assert_eq!(r.detectors[0].confusion.tn, 3);
        assert_eq!(r.detectors[0].balanced_accuracy, None);
        assert!(r.to_json().contains("\"balanced_accuracy\": \"n/a\""));
        assert!(r.to_text().contains("n/a"));
    }

    #[test]
    fn unknown_wheel_is_an_error() {
        let results = vec![DetectionResult::not_flagged(99, "d")];
        assert!(matches!(build_report(&[("d".into(), results)], &truth(), BASE), Err(Error::Data(_))));
    }

    #[test]
    fn multi_class_confusion_tallies() {
        let actual = [0, 0, 1, 1, 2, 2, 2];
        let predicted = [0, 1, 1, 1, 2, 0, 2];
        let c = ConfusionMatrix::from_predictions(&["h", "c", "s"], &actual, &predicted).unwrap();
        assert_eq!(c.counts, vec![vec![1, 1, 0], vec![0, 2, 0], vec![1, 0, 2]]);
        let ba = c.balanced_accuracy().unwrap();
        assert!((ba - (0.5 + 1.0 + 2.0 / 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn svg_contains_zones_and_series() {
        let s = HealthSeries::new(
            1,
            "ocsvm",
            (0..5)
                .map(|i| crate::detection::HealthPoint { timestamp: BASE + i * SECONDS_PER_DAY, value: i as f64 * 0.3 })
                .collect(),
        );
        let a = ZoneAnnotation::new(2, 3, 5).unwrap();
        let svg = health_svg(&[s], Some(&a), 0.88, BASE);
        assert!(svg.starts_with("<svg") && svg.contains("polyline") && svg.matches("<rect").count() == 2);
    }
}
