//! `CHRQ` checkpoints.
//!
//! ```text
//! "CHRQ" | version: u32 | header_len: u32 | header (JSON) | sections: u32
//! section*: name_len: u16 | name | ndim: u8 | dims: u32* | kind: u8 | payload
//! sha256 of everything above (32 bytes)
//! ```
//!
//! All integers are little-endian. Payload kinds: 0 = f32 values, 1 = f16
//! values, 2 = mixed matrix (cherry indices as u16, cherry values, group
//! scales and trick scales as f16, codes as an LSB-first bit stream). The
//! full layout is documented in `docs/formats.md`.

use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, ToyLm};
use crate::autograd::Tensor;
use crate::cherry::MixedMatrix;
use crate::error::{Error, Result};
use crate::quant::{pack_codes, unpack_codes, GroupedQuant, PackedBlob, QuantConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CHRQ";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_F32: u8 = 0;
const KIND_F16: u8 = 1;
const KIND_MIXED: u8 = 2;

/// How full-precision tensors are written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Storage {
    F32,
    F16,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F16(Vec<f16>),
    Mixed(MixedMatrix),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

impl Section {
    /// Dense values as seen by the model.
    pub fn values(&self) -> Result<Vec<f32>> {
        match &self.payload {
            Payload::F32(v) => Ok(v.clone()),
            Payload::F16(v) => Ok(v.iter().map(|x| x.to_f32()).collect()),
            Payload::Mixed(m) => m.reconstruct().map_err(|e| match e {
                Error::Corrupt { section, detail } => Error::corrupt(format!("{}: {section}", self.name), detail),
                other => other,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    /// `None` marks a full-precision checkpoint.
    quant: Option<QuantConfig>,
    manifest: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub quant: Option<QuantConfig>,
    /// Run manifest (resolved config, seeds, corpus hash). Must not contain
    /// wall-clock data, or identical runs stop producing identical bytes.
    pub manifest: serde_json::Value,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    /// Full-precision checkpoint of `model`.
    pub fn from_model(model: &ToyLm<f32>, storage: Storage, manifest: serde_json::Value) -> Self {
        let sections = model
            .names()
            .iter()
            .zip(model.params())
            .map(|(n, p)| Section {
                name: n.clone(),
                shape: p.shape().to_vec(),
                payload: dense_payload(p.data(), storage),
            })
            .collect();
        Self {
            model: model.config().clone(),
            quant: None,
            manifest,
            sections,
        }
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn mixed(&self, name: &str) -> Option<&MixedMatrix> {
        match self.section(name).map(|s| &s.payload) {
            Some(Payload::Mixed(m)) => Some(m),
            _ => None,
        }
    }

    /// Rebuilds the model from stored (and, for mixed sections,
    /// reconstructed) values.
    pub fn to_model(&self) -> Result<ToyLm<f32>> {
        let named = self
            .sections
            .iter()
            .map(|s| Ok((s.name.clone(), Tensor::new(s.shape.clone(), s.values()?)?)))
            .collect::<Result<Vec<_>>>()?;
        ToyLm::from_parts(self.model.clone(), named)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            quant: self.quant,
            manifest: self.manifest.clone(),
        })
        .map_err(|e| Error::config(format!("cannot serialize checkpoint header: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, len32(header.len(), "header")?);
        out.extend_from_slice(&header);
        put_u32(&mut out, len32(self.sections.len(), "section count")?);
        for s in &self.sections {
            write_section(&mut out, s)?;
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::corrupt("magic", "not a CHRQ checkpoint"));
        }
        if bytes.len() < 8 + 32 {
            return Err(Error::corrupt("checksum", "file truncated"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::corrupt(
                "version",
                format!("format version {version}, this build reads {CHECKPOINT_VERSION}"),
            ));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::corrupt("checksum", "SHA-256 mismatch (truncated or modified file)"));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let hlen = r.u32("header")? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::corrupt("header", e.to_string()))?;
        let count = r.u32("section count")? as usize;
        let mut sections = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            sections.push(read_section(&mut r)?);
        }
        if r.pos != body.len() {
            return Err(Error::corrupt("trailer", format!("{} unexpected bytes", body.len() - r.pos)));
        }
        let ck = Self {
            model: header.model,
            quant: header.quant,
            manifest: header.manifest,
            sections,
        };
        ck.check_layout()?;
        Ok(ck)
    }

    /// Section names and shapes must match the model configuration.
    fn check_layout(&self) -> Result<()> {
        let expected = self.model.parameter_shapes();
        let found: Vec<(String, Vec<usize>)> = self.sections.iter().map(|s| (s.name.clone(), s.shape.clone())).collect();
        if expected != found {
            return Err(Error::corrupt("sections", "section list does not match the model configuration"));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Loads and insists on a particular model configuration.
    pub fn load_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.model != expected {
            return Err(Error::ConfigMismatch {
                expected: serde_json::to_string(expected).unwrap_or_default(),
                found: serde_json::to_string(&ck.model).unwrap_or_default(),
            });
        }
        Ok(ck)
    }
}

pub(crate) fn dense_payload(data: &[f32], storage: Storage) -> Payload {
    match storage {
        Storage::F32 => Payload::F32(data.to_vec()),
        Storage::F16 => Payload::F16(data.iter().map(|&v| f16::from_f32(v)).collect()),
    }
}

fn len32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::config(format!("{what} too large for the format: {n}")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f16s(out: &mut Vec<u8>, v: &[f16]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn write_section(out: &mut Vec<u8>, s: &Section) -> Result<()> {
    let name = s.name.as_bytes();
    let nlen = u16::try_from(name.len()).map_err(|_| Error::config(format!("section name too long: {}", s.name)))?;
    out.extend_from_slice(&nlen.to_le_bytes());
    out.extend_from_slice(name);
    out.push(u8::try_from(s.shape.len()).map_err(|_| Error::config("too many dimensions"))?);
    for &d in &s.shape {
        put_u32(out, len32(d, "dimension")?);
    }
    let numel: usize = s.shape.iter().product();
    match &s.payload {
        Payload::F32(v) => {
            if v.len() != numel {
                return Err(Error::config(format!("{}: {} values for shape {:?}", s.name, v.len(), s.shape)));
            }
            out.push(KIND_F32);
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Payload::F16(v) => {
            if v.len() != numel {
                return Err(Error::config(format!("{}: {} values for shape {:?}", s.name, v.len(), s.shape)));
            }
            out.push(KIND_F16);
            put_f16s(out, v);
        }
        Payload::Mixed(m) => {
            if s.shape != [m.rows, m.cols] {
                return Err(Error::config(format!("{}: mixed matrix {}x{} under shape {:?}", s.name, m.rows, m.cols, s.shape)));
            }
            out.push(KIND_MIXED);
            put_u32(out, len32(m.cherry_indices.len(), "cherry count")?);
            for i in &m.cherry_indices {
                out.extend_from_slice(&i.to_le_bytes());
            }
            put_f16s(out, &m.cherry_values);
            out.push(m.normal.bits);
            put_u32(out, len32(m.normal.group_size, "group size")?);
            put_u32(out, len32(m.normal.scales.len(), "scale count")?);
            for &sc in &m.normal.scales {
                let h = f16::from_f32(sc);
                if h.to_f32() != sc {
                    return Err(Error::config(format!("{}: group scale {sc} is not representable in 16 bits", s.name)));
                }
                out.extend_from_slice(&h.to_le_bytes());
            }
            let blob = pack_codes(&m.normal.codes, m.normal.bits)?;
            out.push(blob.layout);
            put_u32(out, len32(blob.len, "code count")?);
            put_u32(out, len32(blob.bytes.len(), "code bytes")?);
            out.extend_from_slice(&blob.bytes);
            match &m.trick_scales {
                Some(t) => {
                    out.push(1);
                    put_f16s(out, t);
                }
                None => out.push(0),
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::corrupt(section, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, section: &str) -> Result<u8> {
        Ok(self.take(1, section)?[0])
    }

    fn u16(&mut self, section: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, section)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn f16s(&mut self, n: usize, section: &str) -> Result<Vec<f16>> {
        let raw = self.take(n.checked_mul(2).ok_or_else(|| Error::corrupt(section, "length overflow"))?, section)?;
        Ok(raw.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]])).collect())
    }
}

fn read_section(r: &mut Reader) -> Result<Section> {
    let nlen = r.u16("section name")? as usize;
    let name = String::from_utf8(r.take(nlen, "section name")?.to_vec())
        .map_err(|_| Error::corrupt("section name", "not UTF-8"))?;
    let sec = name.as_str();
    let ndim = r.u8(sec)? as usize;
    let shape = (0..ndim).map(|_| r.u32(sec).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let numel = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::corrupt(sec, "shape overflow"))?;
    let payload = match r.u8(sec)? {
        KIND_F32 => {
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::corrupt(sec, "length overflow"))?, sec)?;
            Payload::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
        }
        KIND_F16 => Payload::F16(r.f16s(numel, sec)?),
        KIND_MIXED => {
            let [rows, cols] = shape[..] else {
                return Err(Error::corrupt(sec, "mixed payload on a non-matrix"));
            };
            let k = r.u32(sec)? as usize;
            if k >= cols {
                return Err(Error::corrupt(sec, format!("{k} cherry columns in {cols}")));
            }
            let cherry_indices = (0..k).map(|_| r.u16(sec)).collect::<Result<Vec<_>>>()?;
            let cherry_values = r.f16s(rows * k, sec)?;
            let bits = r.u8(sec)?;
            let group_size = r.u32(sec)? as usize;
            let nscales = r.u32(sec)? as usize;
            if group_size == 0 || nscales != rows * (cols - k).div_ceil(group_size) {
                return Err(Error::corrupt(sec, format!("{nscales} scales with group size {group_size}")));
            }
            let scales = r.f16s(nscales, sec)?.into_iter().map(f16::to_f32).collect();
            let layout = r.u8(sec)?;
            let len = r.u32(sec)? as usize;
            let nbytes = r.u32(sec)? as usize;
            if len != rows * (cols - k) {
                return Err(Error::corrupt(sec, format!("{len} codes for {rows}x{}", cols - k)));
            }
            let blob = PackedBlob {
                bytes: r.take(nbytes, sec)?.to_vec(),
                bits,
                len,
                layout,
            };
            let codes = unpack_codes(&blob).map_err(|e| match e {
                Error::Corrupt { detail, .. } => Error::corrupt(sec, detail),
                other => other,
            })?;
            let trick_scales = match r.u8(sec)? {
                0 => None,
                1 => Some(r.f16s(cols, sec)?),
                t => return Err(Error::corrupt(sec, format!("bad trick flag {t}"))),
            };
            Payload::Mixed(MixedMatrix {
                rows,
                cols,
                cherry_indices,
                cherry_values,
                normal: GroupedQuant {
                    codes,
                    scales,
                    bits,
                    group_size,
                    rows,
                    cols: cols - k,
                },
                trick_scales,
            })
        }
        other => return Err(Error::corrupt(sec, format!("unknown payload kind {other}"))),
    };
    Ok(Section { name, shape, payload })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cherry::split_weights;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 16,
            layers: 1,
            width: 8,
            heads: 2,
            context: 4,
            mlp_hidden: 16,
            seed: 1,
        }
    }

    fn mixed_checkpoint() -> Checkpoint {
        let m = ToyLm::<f32>::new(cfg()).unwrap();
        let mut ck = Checkpoint::from_model(&m, Storage::F16, serde_json::json!({"seed": 1}));
        let q = QuantConfig::new(2, 4);
        ck.quant = Some(q);
        for s in ck.sections.iter_mut().filter(|s| crate::lm::is_quantizable(&s.name)) {
            let w = s.values().unwrap();
            let trick: Vec<f32> = (0..s.shape[1]).map(|j| 1.0 + j as f32 / 8.0).collect();
            s.payload = Payload::Mixed(split_weights(&w, s.shape[0], s.shape[1], &[3], &q, Some(&trick)).unwrap());
        }
        ck
    }

    #[test]
    fn byte_fixpoint() {
        let ck = mixed_checkpoint();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corruption_is_named() {
        let bytes = mixed_checkpoint().to_bytes().unwrap();
        let trunc = &bytes[..bytes.len() - 10];
        assert!(matches!(Checkpoint::from_bytes(trunc), Err(Error::Corrupt { section, .. }) if section == "checksum"));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Corrupt { section, .. }) if section == "magic"));
        let mut ver = bytes.clone();
        ver[4] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Corrupt { section, .. }) if section == "version"));
        let mut flip = bytes;
        let mid = flip.len() / 2;
        flip[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flip), Err(Error::Corrupt { section, .. }) if section == "checksum"));
    }

    #[test]
    fn f32_storage_is_lossless() {
        let m = ToyLm::<f32>::new(cfg()).unwrap();
        let ck = Checkpoint::from_model(&m, Storage::F32, serde_json::Value::Null);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap().to_model().unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn wrong_vocab_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.chrq");
        mixed_checkpoint().save(&path).unwrap();
        let other = ModelConfig { vocab: 32, ..cfg() };
        assert!(matches!(Checkpoint::load_for(&path, &other), Err(Error::ConfigMismatch { .. })));
        assert!(Checkpoint::load_for(&path, &cfg()).is_ok());
    }
}
