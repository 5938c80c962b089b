//! Portable raw image format.
//!
//! Little-endian header `magic "AFIM", u32 H, u32 W, u32 C` followed by
//! `H*W*C` bytes, row-major. Used for test datasets and materialized
//! augmented images (file extension `.raw`).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AFIM";

/// A decoded image before feature scaling: integer intensities 0-255.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major `H*W*C` bytes.
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "raw image data length {} does not match {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(RawImage {
            height,
            width,
            channels,
            data,
        })
    }
}

pub fn write(path: &Path, img: &RawImage) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + img.data.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(img.height as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width as u32).to_le_bytes());
    buf.extend_from_slice(&(img.channels as u32).to_le_bytes());
    buf.extend_from_slice(&img.data);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|reason| Error::Decode {
        path: path.to_path_buf(),
        reason,
    })
}

fn decode(bytes: &[u8]) -> std::result::Result<RawImage, String> {
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err("missing AFIM magic".into());
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let n = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(c))
        .ok_or("dimension overflow")?;
    if bytes.len() != 16 + n {
        return Err(format!(
            "truncated payload: expected {} bytes, found {}",
            n,
            bytes.len() - 16
        ));
    }
    if c != 1 && c != 3 {
        return Err(format!("unsupported channel count {}", c));
    }
    RawImage::new(h, w, c, bytes[16..].to_vec()).map_err(|e| e.to_string())
}
