//! Checkpoint format for named tensor sets.
//!
//! Little-endian: `magic "AFCK", u32 version, u32 n_tensors`, then per
//! tensor `u32 name_len, name bytes (UTF-8), u32 rank, u32 dims..., f32
//! payload`. Tensors are written in sorted-name order so identical
//! parameter sets serialize to identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"AFCK";
pub const VERSION: u32 = 1;

pub fn write<S: Scalar>(path: &Path, params: &ParamSet<S>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read<S: Scalar>(path: &Path) -> Result<ParamSet<S>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Data(format!("{}: {}", path.display(), reason)))
}

fn decode<S: Scalar>(bytes: &[u8]) -> std::result::Result<ParamSet<S>, String> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
        if *pos + n > bytes.len() {
            return Err("truncated checkpoint".into());
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let take_u32 = |pos: &mut usize| -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };

    if take(&mut pos, 4)? != MAGIC {
        return Err("missing AFCK magic".into());
    }
    let version = take_u32(&mut pos)?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {}", version));
    }
    let n_tensors = take_u32(&mut pos)? as usize;
    let mut out = ParamSet::new();
    for _ in 0..n_tensors {
        let name_len = take_u32(&mut pos)? as usize;
        let name = std::str::from_utf8(take(&mut pos, name_len)?)
            .map_err(|_| "invalid UTF-8 tensor name".to_string())?
            .to_string();
        let rank = take_u32(&mut pos)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u32(&mut pos)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
            data.push(S::of(v as f64));
        }
        out.insert(name, Tensor::from_vec(&shape, data).map_err(|e| e.to_string())?);
    }
    if pos != bytes.len() {
        return Err("trailing bytes after last tensor".into());
    }
    Ok(out)
}
