//! File formats and atomic writes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::detection::{HealthPoint, HealthSeries};
use crate::error::{Error, Result};

pub mod manifest;
pub mod prepared;
pub mod wlc;

/// Writes `bytes` to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub const HEALTH_CSV_HEADER: &str = "wheel_id,timestamp,detector,value";

/// One row per point; values use the shortest round-trip representation.
pub fn health_csv(series: &[HealthSeries]) -> String {
    let mut out = String::from(HEALTH_CSV_HEADER);
    out.push('\n');
    for s in series {
        for p in &s.points {
            out.push_str(&format!("{},{},{},{}\n", s.wheel_id, p.timestamp, s.detector, p.value));
        }
    }
    out
}

/// Groups rows by (wheel, detector) in order of first appearance.
pub fn parse_health_csv(text: &str) -> Result<Vec<HealthSeries>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(HEALTH_CSV_HEADER) {
        return Err(Error::Format(format!("health CSV must start with `{HEALTH_CSV_HEADER}`")));
    }
    let mut out: Vec<HealthSeries> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("health CSV line {}: `{line}`", n + 2));
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(bad());
        }
        let wheel_id: u32 = cols[0].parse().map_err(|_| bad())?;
        let timestamp: u64 = cols[1].parse().map_err(|_| bad())?;
        let value: f64 = cols[3].parse().map_err(|_| bad())?;
        let detector = cols[2];
        let point = HealthPoint { timestamp, value };
        match out.iter_mut().find(|s| s.wheel_id == wheel_id && s.detector == detector) {
            Some(s) => s.points.push(point),
            None => out.push(HealthSeries::new(wheel_id, detector, vec![point])),
        }
    }
    Ok(out)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn health_csv_round_trip() {
        let series = vec![
            HealthSeries::new(3, "ocsvm", vec![HealthPoint { timestamp: 10, value: 0.1 + 0.2 }, HealthPoint { timestamp: 11, value: -1e-300 }]),
            HealthSeries::new(4, "helm", vec![HealthPoint { timestamp: 12, value: 7.0 }]),
        ];
        let text = health_csv(&series);
        assert!(text.starts_with("wheel_id,timestamp,detector,value\n3,10,ocsvm,"));
        assert_eq!(parse_health_csv(&text).unwrap(), series);
        assert!(parse_health_csv("a,b\n").is_err());
        assert!(parse_health_csv(&format!("{HEALTH_CSV_HEADER}\n1,x,d,0\n")).is_err());
    }
}
