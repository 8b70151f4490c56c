//! `RHM1` checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RHM1" | u16 version | u32 section count
//! section: [u8; 4] tag | u16 name length | name (utf-8) | u64 payload length | payload
//! ```
//!
//! A `NETW` payload is the layer manifest followed by the `f32` parameter
//! blocks in declaration order:
//!
//! ```text
//! u32 input rank | u32 dims... | u32 layer count
//! per layer: u8 kind | kind-specific u32 dims (leaky-relu: f32 slope)
//! per parameter tensor: raw f32 values
//! ```
//!
//! `OCSV` and `HELM` sections are written by the detector modules.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Layer, LayerSpec, Network, Tensor};

pub const MAGIC: &[u8; 4] = b"RHM1";
pub const VERSION: u16 = 1;

pub const TAG_NETWORK: [u8; 4] = *b"NETW";
pub const TAG_OCSVM: [u8; 4] = *b"OCSV";
pub const TAG_HELM: [u8; 4] = *b"HELM";

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub tag: [u8; 4],
    pub name: String,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    /// Adds or replaces the section with the same tag and name.
    pub fn insert(&mut self, tag: [u8; 4], name: &str, payload: Vec<u8>) {
        if let Some(s) = self.sections.iter_mut().find(|s| s.tag == tag && s.name == name) {
            s.payload = payload;
        } else {
            self.sections.push(Section {
                tag,
                name: name.to_string(),
                payload,
            });
        }
    }

    pub fn get(&self, tag: [u8; 4], name: &str) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|s| s.tag == tag && s.name == name)
            .map(|s| s.payload.as_slice())
    }

    pub fn require(&self, tag: [u8; 4], name: &str) -> Result<&[u8]> {
        self.get(tag, name).ok_or_else(|| {
            Error::Format(format!(
                "checkpoint has no {} section named `{name}`",
                String::from_utf8_lossy(&tag)
            ))
        })
    }

    pub fn insert_network(&mut self, name: &str, net: &Network<f32>) {
        self.insert(TAG_NETWORK, name, encode_network(net));
    }

    pub fn network(&self, name: &str) -> Result<Network<f32>> {
        decode_network(self.require(TAG_NETWORK, name)?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(self.sections.len() as u32);
        for s in &self.sections {
            w.bytes(&s.tag);
            w.u16(s.name.len() as u16);
            w.bytes(s.name.as_bytes());
            w.u64(s.payload.len() as u64);
            w.bytes(&s.payload);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an RHM1 checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("section name is not utf-8".into()))?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?.to_vec();
            sections.push(Section { tag, name, payload });
        }
        r.finish()?;
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const KIND_CONV1D: u8 = 1;
const KIND_DENSE: u8 = 2;
const KIND_LEAKY_RELU: u8 = 3;
const KIND_RELU: u8 = 4;
const KIND_SOFTMAX: u8 = 5;

pub fn encode_network(net: &Network<f32>) -> Vec<u8> {
    let mut w = ByteWriter::default();
    w.u32(net.input_shape().len() as u32);
    for &d in net.input_shape() {
        w.u32(d as u32);
    }
    w.u32(net.layers().len() as u32);
    for layer in net.layers() {
        match *layer.spec() {
            LayerSpec::Conv1d {
                in_channels,
                filters,
                kernel_size,
                stride,
                padding,
            } => {
                w.u8(KIND_CONV1D);
                for v in [in_channels, filters, kernel_size, stride, padding] {
                    w.u32(v as u32);
                }
            }
            LayerSpec::Dense { in_dim, out_dim } => {
                w.u8(KIND_DENSE);
                w.u32(in_dim as u32);
                w.u32(out_dim as u32);
            }
            LayerSpec::LeakyRelu { slope } => {
                w.u8(KIND_LEAKY_RELU);
                w.f32(slope);
            }
            LayerSpec::Relu => w.u8(KIND_RELU),
            LayerSpec::Softmax => w.u8(KIND_SOFTMAX),
        }
    }
    for p in net.params() {
        for &v in p.data() {
            w.f32(v);
        }
    }
    w.into_inner()
}

pub fn decode_network(bytes: &[u8]) -> Result<Network<f32>> {
    let mut r = ByteReader::new(bytes);
    let rank = r.u32()? as usize;
    let input_shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let n_layers = r.u32()? as usize;
    let mut specs = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let spec = match r.u8()? {
            KIND_CONV1D => {
                let mut d = [0usize; 5];
                for v in &mut d {
                    *v = r.u32()? as usize;
                }
                LayerSpec::Conv1d {
                    in_channels: d[0],
                    filters: d[1],
                    kernel_size: d[2],
                    stride: d[3],
                    padding: d[4],
                }
            }
            KIND_DENSE => LayerSpec::Dense {
                in_dim: r.u32()? as usize,
                out_dim: r.u32()? as usize,
            },
            KIND_LEAKY_RELU => LayerSpec::LeakyRelu { slope: r.f32()? },
            KIND_RELU => LayerSpec::Relu,
            KIND_SOFTMAX => LayerSpec::Softmax,
            other => return Err(Error::Format(format!("unknown layer kind {other}"))),
        };
        specs.push(spec);
    }
    let mut layers = Vec::with_capacity(n_layers);
    for spec in specs {
        spec.validate()?;
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        layers.push(Layer::from_parts(spec, params)?);
    }
    r.finish()?;
    Network::from_layers(input_shape, layers)
}

/// Little-endian byte sink.
#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f64_slice(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|&x| self.f64(x));
    }
}

/// Little-endian byte source with bounds checking.
#[derive(Debug)]
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Format(format!("array length {n} exceeds remaining data")));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    /// Errors if unread bytes remain.
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let specs = [
            LayerSpec::conv1d(1, 2, 3, 2),
            LayerSpec::LeakyRelu { slope: 0.1 },
            LayerSpec::dense(2 * 5, 3),
            LayerSpec::Relu,
            LayerSpec::dense(3, 2),
            LayerSpec::Softmax,
        ];
        let net = Network::<f32>::build(vec![1, 10], &specs, 42).unwrap();
        let mut ck = Checkpoint::new();
        ck.insert_network("encoder", &net);
        ck.insert(TAG_OCSVM, "occ", vec![1, 2, 3]);
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"RHM1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.network("encoder").unwrap(), net);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_truncated_and_foreign_data() {
        assert!(Checkpoint::from_bytes(b"XXXX\x01\x00\x00\x00\x00\x00").is_err());
        let mut ck = Checkpoint::new();
        ck.insert_network("n", &Network::<f32>::build(vec![2], &[LayerSpec::dense(2, 1)], 0).unwrap());
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(ck.network("missing").is_err());
    }
}
