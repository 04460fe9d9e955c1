//! Binary checkpoint format.
//!
//! ```text
//! "GSNL" | u32 version | u32 tensor count |
//!   per tensor: u16 name length | name | u8 ndim | u32 dims… | f32 payload
//! ```
//! All integers and floats little-endian. The model configuration travels as
//! an ordinary tensor named `meta.config`.

use std::collections::HashMap;
use std::path::Path;

use super::{ModelConfig, ModelParams, PredictionKind, Tensor, Wiring};
use crate::error::{Error, Result};
use crate::tensor::{GridShape, Real};

pub const MAGIC: &[u8; 4] = b"GSNL";
pub const VERSION: u32 = 1;
const META: &str = "meta.config";

pub fn encode_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub type RawTensor = (Vec<usize>, Vec<f32>);

/// Reads one tensor record. Running out of bytes inside the header is
/// truncation; a payload shorter than its declared dims is corruption.
fn decode_tensor(r: &mut Reader<'_>) -> Result<(String, RawTensor)> {
    let trunc = || Error::Truncated("tensor header cut short".into());
    let name_len = r.u16().ok_or_else(trunc)? as usize;
    let name = String::from_utf8(r.take(name_len).ok_or_else(trunc)?.to_vec())
        .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
    let ndim = r.u8().ok_or_else(trunc)? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32().ok_or_else(trunc)? as usize);
    }
    let count: usize = dims.iter().product();
    if count
        .checked_mul(4)
        .is_none_or(|bytes| bytes > r.remaining())
    {
        return Err(Error::Corrupt(format!(
            "tensor {name} declares {dims:?} but only {} payload bytes remain",
            r.remaining()
        )));
    }
    let bytes = r.take(count * 4).expect("length checked");
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((name, (dims, data)))
}

/// Decodes a single tensor record occupying all of `bytes`.
pub fn decode_single_tensor(bytes: &[u8]) -> Result<(String, RawTensor)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let out = decode_tensor(&mut r)?;
    if r.remaining() != 0 {
        return Err(Error::Corrupt(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

fn meta_values(c: &ModelConfig) -> Vec<f32> {
    [
        c.grid.h,
        c.grid.w,
        c.grid.c,
        c.d,
        c.n_head,
        c.blocks,
        c.vocab,
        c.n_tokens,
        c.time_freqs,
        match c.wiring {
            Wiring::Cross => 0,
            Wiring::Joint => 1,
        },
        match c.prediction {
            PredictionKind::Epsilon => 0,
            PredictionKind::Velocity => 1,
        },
    ]
    .iter()
    .map(|&v| v as f32)
    .collect()
}

fn config_from_meta(v: &[f32]) -> Result<ModelConfig> {
    if v.len() != 11 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(Error::Corrupt("malformed meta.config tensor".into()));
    }
    let u: Vec<usize> = v.iter().map(|&x| x as usize).collect();
    let wiring = match u[9] {
        0 => Wiring::Cross,
        1 => Wiring::Joint,
        w => return Err(Error::Corrupt(format!("unknown wiring code {w}"))),
    };
    let prediction = match u[10] {
        0 => PredictionKind::Epsilon,
        1 => PredictionKind::Velocity,
        k => return Err(Error::Corrupt(format!("unknown prediction code {k}"))),
    };
    let cfg = ModelConfig {
        grid: GridShape::new(u[0], u[1], u[2]),
        d: u[3],
        n_head: u[4],
        blocks: u[5],
        vocab: u[6],
        n_tokens: u[7],
        time_freqs: u[8],
        wiring,
        prediction,
    };
    cfg.validate()
        .map_err(|e| Error::Corrupt(format!("invalid model config: {e}")))?;
    Ok(cfg)
}

pub fn to_bytes<T: Real>(params: &ModelParams<T>) -> Vec<u8> {
    let mut count = 1u32;
    params.for_each(|_, _| count += 1);
    let mut out = Vec::with_capacity(16 + params.num_params() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    let meta = meta_values(&params.config);
    encode_tensor(&mut out, META, &[meta.len()], &meta);
    params.for_each(|name, t| {
        let data: Vec<f32> = t.data.iter().map(|v| v.f64() as f32).collect();
        encode_tensor(&mut out, name, &t.dims, &data);
    });
    out
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<ModelParams<T>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r
        .u32()
        .ok_or_else(|| Error::Truncated("missing version".into()))?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let count = r
        .u32()
        .ok_or_else(|| Error::Truncated("missing tensor count".into()))? as usize;
    let mut table: HashMap<String, RawTensor> = HashMap::with_capacity(count);
    for i in 0..count {
        if r.remaining() == 0 {
            return Err(Error::Truncated(format!(
                "tensor table ends after {i} of {count} tensors"
            )));
        }
        let (name, t) = decode_tensor(&mut r)?;
        if table.insert(name.clone(), t).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Corrupt(format!(
            "{} bytes after the last tensor",
            r.remaining()
        )));
    }
    let (_, meta) = table
        .remove(META)
        .ok_or_else(|| Error::Corrupt("missing meta.config".into()))?;
    let config = config_from_meta(&meta)?;
    let mut params = ModelParams::<T>::layout(config)?;
    let mut problem = None;
    params.for_each_mut(|name, t: &mut Tensor<T>| {
        if problem.is_some() {
            return;
        }
        match table.remove(name) {
            Some((dims, data)) if dims == t.dims => {
                t.data = data.into_iter().map(|v| T::lit(v as f64)).collect();
            }
            Some((dims, _)) => {
                problem = Some(Error::Corrupt(format!(
                    "tensor {name} has dims {dims:?}, expected {:?}",
                    t.dims
                )))
            }
            None => problem = Some(Error::Corrupt(format!("missing tensor {name}"))),
        }
    });
    if let Some(e) = problem {
        return Err(e);
    }
    if let Some(extra) = table.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
    }
    Ok(params)
}

pub fn save<T: Real>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(params))?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<ModelParams<T>> {
    from_bytes(&std::fs::read(path)?)
}
