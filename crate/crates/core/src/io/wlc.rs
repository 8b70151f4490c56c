//! "WLC1" binary measurement files.
//!
//! Layout, little-endian: magic `WLC1`, u32 record count, then per record
//! u64 timestamp, u32 wheel id, u32 checkpoint id, f32 speed, f32 load and
//! eight segments of (u32 length, `length` f32 samples).

use std::path::Path;

use crate::checkpoint::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::prep::{Measurement, SENSOR_COUNT};

pub const MAGIC: &[u8; 4] = b"WLC1";

pub fn encode_measurements(records: &[Measurement]) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(MAGIC);
    let count = u32::try_from(records.len()).map_err(|_| Error::Data("too many records for one file".into()))?;
    w.u32(count);
    for m in records {
        if m.segments.len() != SENSOR_COUNT {
            return Err(Error::Data(format!(
                "wheel {} at {}: {} segments, the format stores exactly {SENSOR_COUNT}",
                m.wheel_id,
                m.timestamp,
                m.segments.len()
            )));
        }
        w.u64(m.timestamp);
        w.u32(m.wheel_id);
        w.u32(m.checkpoint_id);
        w.f32(m.speed);
        w.f32(m.load);
        for seg in &m.segments {
            w.u32(seg.len() as u32);
            seg.iter().for_each(|&v| w.f32(v));
        }
    }
    Ok(w.into_inner())
}

pub fn decode_measurements(bytes: &[u8]) -> Result<Vec<Measurement>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a WLC1 measurement file".into()));
    }
    let count = r.u32()? as usize;
    // 32 bytes is the smallest possible record.
    if count > bytes.len() / 32 {
        return Err(Error::Format(format!("record count {count} exceeds the file size")));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let timestamp = r.u64()?;
        let wheel_id = r.u32()?;
        let checkpoint_id = r.u32()?;
        let speed = r.f32()?;
        let load = r.f32()?;
        let segments = (0..SENSOR_COUNT)
            .map(|s| {
                let len = r.u32()? as usize;
                let raw = r.take(len * 4).map_err(|e| Error::Format(format!("record {i}, sensor {s}: {e}")))?;
                Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            })
            .collect::<Result<Vec<Vec<f32>>>>()?;
        out.push(Measurement {
            wheel_id,
            checkpoint_id,
            timestamp,
            speed,
            load,
            segments,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn write_measurements(path: &Path, records: &[Measurement]) -> Result<()> {
    super::write_atomic(path, &encode_measurements(records)?)
}

pub fn read_measurements(path: &Path) -> Result<Vec<Measurement>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_measurements(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
