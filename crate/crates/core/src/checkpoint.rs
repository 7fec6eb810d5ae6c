//! Binary weight files for the recurrent model and the siamese matcher.
//!
//! Layout (all integers u32 little-endian, values f64 little-endian):
//! magic `LRCRWGT\0`, version, payload kind, a kind-specific header, the
//! tensor count, then per tensor: name length, UTF-8 name, rank, dims, values.

use std::fs;
use std::path::Path;

use crate::cost_volume::SiameseWeights;
use crate::error::{bail, Result};
use crate::model::{LrcrWeights, ModelConfig, HEAD_DEPTH, TOWER_DEPTH};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"LRCRWGT\0";
const VERSION: u32 = 1;
const KIND_MODEL: u32 = 1;
const KIND_MATCHER: u32 = 2;

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            bail!(Format, "weight file truncated at byte {}", self.pos);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode(kind: u32, header: &[usize], tensors: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION as usize);
    put_u32(&mut out, kind as usize);
    put_u32(&mut out, header.len());
    for &h in header {
        put_u32(&mut out, h);
    }
    put_u32(&mut out, tensors.len());
    for (name, t) in tensors {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

type Decoded = (Vec<usize>, Vec<(String, Tensor)>);

fn decode(bytes: &[u8], expected_kind: u32) -> Result<Decoded> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        bail!(Format, "not a weight file");
    }
    let version = r.u32()?;
    if version != VERSION {
        bail!(Format, "unsupported weight file version {}", version);
    }
    let kind = r.u32()?;
    if kind != expected_kind {
        bail!(Format, "weight file holds payload kind {}, expected {}", kind, expected_kind);
    }
    let header_len = r.usize()?;
    let header = (0..header_len).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let count = r.usize()?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.usize()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| crate::Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.usize()?;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).map_or(true, |b| b > bytes.len() - r.pos) {
            bail!(Format, "tensor {} overruns the file", name);
        }
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push((name, Tensor::new(&shape, data)?));
    }
    if r.pos != bytes.len() {
        bail!(Format, "{} trailing bytes after the last tensor", bytes.len() - r.pos);
    }
    Ok((header, tensors))
}

fn config_header(c: &ModelConfig) -> Vec<usize> {
    let mut h = vec![c.disparities, c.height, c.width];
    h.extend_from_slice(&c.cell_channels);
    h.extend_from_slice(&c.head_channels);
    h.push(c.branch_channels);
    h.push(usize::from(c.share_towers));
    h
}

fn config_from_header(h: &[usize]) -> Result<ModelConfig> {
    if h.len() != 3 + TOWER_DEPTH + HEAD_DEPTH + 2 {
        bail!(Format, "model header has {} fields", h.len());
    }
    let mut c = ModelConfig::new(h[0], h[1], h[2]);
    c.cell_channels.copy_from_slice(&h[3..3 + TOWER_DEPTH]);
    c.head_channels.copy_from_slice(&h[3 + TOWER_DEPTH..3 + TOWER_DEPTH + HEAD_DEPTH]);
    c.branch_channels = h[3 + TOWER_DEPTH + HEAD_DEPTH];
    c.share_towers = match h[h.len() - 1] {
        0 => false,
        1 => true,
        v => bail!(Format, "share flag must be 0 or 1, got {}", v),
    };
    c.validate()?;
    Ok(c)
}

pub fn encode_model(w: &LrcrWeights) -> Vec<u8> {
    let named: Vec<(String, &Tensor)> = w.store.names.iter().cloned().zip(&w.store.tensors).collect();
    encode(KIND_MODEL, &config_header(&w.config), &named)
}

/// Rebuilds the model from its header and checks every stored tensor
/// against the expected name and shape.
pub fn decode_model(bytes: &[u8]) -> Result<LrcrWeights> {
    let (header, tensors) = decode(bytes, KIND_MODEL)?;
    let config = config_from_header(&header)?;
    let mut w = LrcrWeights::init(config, 0)?;
    if tensors.len() != w.store.len() {
        bail!(Format, "expected {} tensors, found {}", w.store.len(), tensors.len());
    }
    for (i, (name, t)) in tensors.into_iter().enumerate() {
        if name != w.store.names[i] {
            bail!(Format, "tensor {} is named {}, expected {}", i, name, w.store.names[i]);
        }
        if t.shape() != w.store.tensors[i].shape() {
            bail!(Format, "tensor {} has shape {:?}, expected {:?}", name, t.shape(), w.store.tensors[i].shape());
        }
        w.store.tensors[i] = t;
    }
    Ok(w)
}

pub fn save_model(w: &LrcrWeights, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_model(w))?)
}

pub fn load_model(path: &Path) -> Result<LrcrWeights> {
    decode_model(&fs::read(path)?)
}

pub fn encode_matcher(w: &SiameseWeights) -> Vec<u8> {
    encode(KIND_MATCHER, &[], &w.named_tensors())
}

pub fn decode_matcher(bytes: &[u8]) -> Result<SiameseWeights> {
    let (_, tensors) = decode(bytes, KIND_MATCHER)?;
    SiameseWeights::from_named(tensors)
}

pub fn save_matcher(w: &SiameseWeights, path: &Path) -> Result<()> {
    Ok(fs::write(path, encode_matcher(w))?)
}

pub fn load_matcher(path: &Path) -> Result<SiameseWeights> {
    decode_matcher(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> LrcrWeights {
        let mut c = ModelConfig::new(4, 6, 8);
        c.share_towers = false;
        LrcrWeights::init(c, 11).unwrap()
    }

    #[test]
    fn model_round_trip_is_exact() {
        let w = small();
        let back = decode_model(&encode_model(&w)).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn matcher_round_trip_is_exact() {
        let w = SiameseWeights::init(3);
        assert_eq!(decode_matcher(&encode_matcher(&w)).unwrap(), w);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_model(&small());
        assert!(decode_model(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode_model(&bad_magic).is_err());
        assert!(decode_matcher(&bytes).is_err());
    }
}
