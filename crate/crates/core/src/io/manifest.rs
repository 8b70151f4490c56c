//! Dataset manifest: wheel roster, split, visits, annotations, and the
//! measurement file of every wheel.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::wlc;
use crate::error::{Error, Result};
use crate::sim::{FaultKind, Fleet, WheelTimeline, ZoneAnnotation};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WheelEntry {
    pub wheel_id: u32,
    pub split: Split,
    pub fault: Option<FaultKind>,
    pub annotation: Option<ZoneAnnotation>,
    pub visits: Vec<u64>,
    /// Relative to the manifest's directory.
    pub file: String,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub base_timestamp: u64,
    pub wheels: Vec<WheelEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Format(format!(
                "manifest version {} is not supported (expected {MANIFEST_VERSION})",
                self.format_version
            )));
        }
        let mut ids = std::collections::BTreeSet::new();
        for w in &self.wheels {
            if !ids.insert(w.wheel_id) {
                return Err(Error::Data(format!("wheel {} listed twice", w.wheel_id)));
            }
            if w.split == Split::Train && w.fault.is_some() {
                return Err(Error::Data(format!("training wheel {} carries a fault", w.wheel_id)));
            }
            if w.fault.is_some() != w.annotation.is_some() {
                return Err(Error::Data(format!("wheel {}: fault and annotation must come together", w.wheel_id)));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &WheelEntry> {
        self.wheels.iter().filter(move |w| w.split == split)
    }
}

fn entry(w: &WheelTimeline, split: Split) -> WheelEntry {
    WheelEntry {
        wheel_id: w.wheel_id,
        split,
        fault: w.fault,
        annotation: w.annotation,
        visits: w.visits.clone(),
        file: format!("wheels/{:05}.wlc", w.wheel_id),
        records: w.measurements.len(),
    }
}

/// Writes one measurement file per wheel plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, train: &Fleet, test: &Fleet, seed: u64) -> Result<DatasetManifest> {
    if train.config.base_timestamp != test.config.base_timestamp {
        return Err(Error::Config("train and test fleets must share a base timestamp".into()));
    }
    let wheels: Vec<WheelEntry> = train
        .wheels
        .iter()
        .map(|w| entry(w, Split::Train))
        .chain(test.wheels.iter().map(|w| entry(w, Split::Test)))
        .collect();
    let manifest = DatasetManifest {
        format_version: MANIFEST_VERSION,
        seed,
        base_timestamp: train.config.base_timestamp,
        wheels,
    };
    manifest.validate()?;
    for (w, e) in train.wheels.iter().chain(&test.wheels).zip(&manifest.wheels) {
        wlc::write_measurements(&dir.join(&e.file), &w.measurements)?;
    }
    super::write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    manifest.validate()?;
    Ok(manifest)
}

/// Loads the timelines of one split in manifest order.
pub fn read_split(dir: &Path, manifest: &DatasetManifest, split: Split) -> Result<Vec<WheelTimeline>> {
    manifest
        .split(split)
        .map(|e| {
            let path: PathBuf = dir.join(&e.file);
            let measurements = wlc::read_measurements(&path)?;
            if measurements.len() != e.records || measurements.iter().any(|m| m.wheel_id != e.wheel_id) {
                return Err(Error::Data(format!(
                    "{} does not match the manifest entry of wheel {}",
                    path.display(),
                    e.wheel_id
                )));
            }
            Ok(WheelTimeline {
                wheel_id: e.wheel_id,
                visits: e.visits.clone(),
                measurements,
                fault: e.fault,
                annotation: e.annotation,
            })
        })
        .collect()
}
