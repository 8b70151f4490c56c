//! "PRP1" files: prepared signals of both splits plus the wheel metadata
//! needed downstream.
//!
//! Layout, little-endian: magic `PRP1`, u64 base timestamp, u32 signal
//! length, u32 wheel count, then per wheel: u32 id, u8 split (0 train,
//! 1 test), u8 fault (0 none, 1 shelling, 2 crack, 3 flat), three u32 zone
//! days when a fault is present, u32 visit count and u64 visits, u32 record
//! count, and per record u64 timestamp, f64 dynamic coefficient and the
//! signal as f32 samples.

use std::path::Path;

use crate::checkpoint::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::io::manifest::Split;
use crate::sim::{FaultKind, ZoneAnnotation};

pub const MAGIC: &[u8; 4] = b"PRP1";

/// Prepared measurements of one wheel, time-ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWheel {
    pub wheel_id: u32,
    pub split: Split,
    pub fault: Option<FaultKind>,
    pub annotation: Option<ZoneAnnotation>,
    pub visits: Vec<u64>,
    pub timestamps: Vec<u64>,
    /// Peak-to-mean ratio of the raw concatenated signal.
    pub dyn_coeffs: Vec<f64>,
    pub signals: Vec<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedData {
    pub base_timestamp: u64,
    pub signal_length: usize,
    pub wheels: Vec<PreparedWheel>,
}

impl PreparedData {
    pub fn split(&self, split: Split) -> Vec<&PreparedWheel> {
        self.wheels.iter().filter(|w| w.split == split).collect()
    }
}

fn fault_code(f: Option<FaultKind>) -> u8 {
    match f {
        None => 0,
        Some(FaultKind::Shelling) => 1,
        Some(FaultKind::Crack) => 2,
        Some(FaultKind::Flat) => 3,
    }
}

pub fn encode_prepared(data: &PreparedData) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    w.u64(data.base_timestamp);
    w.u32(data.signal_length as u32);
    w.u32(data.wheels.len() as u32);
    for wheel in &data.wheels {
        let n = wheel.timestamps.len();
        if wheel.signals.len() != n || wheel.dyn_coeffs.len() != n {
            return Err(Error::Dimension(format!("wheel {}: record arrays differ in length", wheel.wheel_id)));
        }
        if wheel.fault.is_some() != wheel.annotation.is_some() {
            return Err(Error::Data(format!("wheel {}: fault and annotation must come together", wheel.wheel_id)));
        }
        w.u32(wheel.wheel_id);
        w.u8(match wheel.split {
            Split::Train => 0,
            Split::Test => 1,
        });
        w.u8(fault_code(wheel.fault));
        if let Some(a) = wheel.annotation {
            w.u32(a.onset_day);
            w.u32(a.manifest_day);
            w.u32(a.monitoring_end_day);
        }
        w.u32(wheel.visits.len() as u32);
        wheel.visits.iter().for_each(|&v| w.u64(v));
        w.u32(n as u32);
        for ((&t, &d), s) in wheel.timestamps.iter().zip(&wheel.dyn_coeffs).zip(&wheel.signals) {
            if s.len() != data.signal_length {
                return Err(Error::Dimension(format!(
                    "wheel {}: signal of length {} in a file of length {}",
                    wheel.wheel_id,
                    s.len(),
                    data.signal_length
                )));
            }
            w.u64(t);
            w.f64(d);
            s.iter().for_each(|&v| w.f32(v));
        }
    }
    Ok(w.into_inner())
}

pub fn decode_prepared(bytes: &[u8]) -> Result<PreparedData> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a PRP1 prepared-signal file".into()));
    }
    let base_timestamp = r.u64()?;
    let signal_length = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut wheels = Vec::new();
    for _ in 0..count {
        let wheel_id = r.u32()?;
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Test,
            s => return Err(Error::Format(format!("wheel {wheel_id}: unknown split code {s}"))),
        };
        let fault = match r.u8()? {
            0 => None,
            1 => Some(FaultKind::Shelling),
            2 => Some(FaultKind::Crack),
            3 => Some(FaultKind::Flat),
            f => return Err(Error::Format(format!("wheel {wheel_id}: unknown fault code {f}"))),
        };
        let annotation = match fault {
            Some(_) => Some(
                ZoneAnnotation::new(r.u32()?, r.u32()?, r.u32()?)
                    .map_err(|e| Error::Format(format!("wheel {wheel_id}: {e}")))?,
            ),
            None => None,
        };
        let nv = r.u32()? as usize;
        let visits = (0..nv).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = r.u32()? as usize;
        let record = 16 + 4 * signal_length;
        if n.saturating_mul(record) > bytes.len() {
            return Err(Error::Format(format!("wheel {wheel_id}: record count {n} exceeds the file size")));
        }
        let mut timestamps = Vec::with_capacity(n);
        let mut dyn_coeffs = Vec::with_capacity(n);
        let mut signals = Vec::with_capacity(n);
        for _ in 0..n {
            timestamps.push(r.u64()?);
            dyn_coeffs.push(r.f64()?);
            let raw = r.take(4 * signal_length)?;
            signals.push(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect());
        }
        wheels.push(PreparedWheel {
            wheel_id,
            split,
            fault,
            annotation,
            visits,
            timestamps,
            dyn_coeffs,
            signals,
        });
    }
    r.finish()?;
    Ok(PreparedData {
        base_timestamp,
        signal_length,
        wheels,
    })
}

pub fn write_prepared(path: &Path, data: &PreparedData) -> Result<()> {
    super::write_atomic(path, &encode_prepared(data)?)
}

pub fn read_prepared(path: &Path) -> Result<PreparedData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_prepared(&bytes)
}
