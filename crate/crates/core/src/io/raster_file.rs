//! The `GCVDR1` raster container.
//!
//! Layout: 6-byte magic `GCVDR1`, then width, height, channels as
//! little-endian `u32`, then a row-major, channel-interleaved payload of
//! little-endian IEEE-754 binary32 values.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const MAGIC: &[u8; 6] = b"GCVDR1";
pub const HEADER_LEN: usize = 18;

/// Largest payload accepted on read (1 GiB).
const MAX_PAYLOAD: u64 = 1 << 30;

pub fn payload_len(width: u32, height: u32, channels: u32) -> Option<u64> {
    u64::from(width)
        .checked_mul(u64::from(height))?
        .checked_mul(u64::from(channels))?
        .checked_mul(4)
}

pub fn encode_raster(r: &Raster<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + r.data().len() * 4);
    out.extend_from_slice(MAGIC);
    for d in [r.width(), r.height(), r.channels()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in r.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_raster(bytes: &[u8], path: &Path) -> Result<Raster<f32>> {
    let err = |reason: String| Error::RasterFormat {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER_LEN {
        return Err(err(format!("header needs {HEADER_LEN} bytes, got {}", bytes.len())));
    }
    if &bytes[..6] != MAGIC {
        return Err(err("bad magic".into()));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().unwrap());
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let need = payload_len(w, h, c)
        .filter(|&n| n <= MAX_PAYLOAD)
        .ok_or_else(|| err(format!("dimension overflow ({w}x{h}x{c})")))?;
    let have = (bytes.len() - HEADER_LEN) as u64;
    if have < need {
        return Err(err(format!("truncated payload: expected {need} bytes, found {have}")));
    }
    if have > need {
        return Err(err(format!(
            "trailing bytes: expected {need} payload bytes, found {have}"
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Raster::from_vec(w as usize, h as usize, c as usize, data)
}

pub fn write_raster(r: &Raster<f32>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_raster(r)).map_err(|e| Error::io(path, e))
}

pub fn read_raster(path: &Path) -> Result<Raster<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raster(&bytes, path)
}
