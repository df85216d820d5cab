//! V3D: a minimal little-endian volume container.
//!
//! ```text
//! bytes 0..4   "V3D1"
//! 4 x u32      channels, width, height, depth
//! u8           dtype (1 = f32)
//! u8           kind (0 = intensity, 1 = labels stored as floats)
//! 2 bytes      reserved, zero
//! payload      channels * width * height * depth f32, canonical voxel order
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Dims, LabelVolume, Volume};

pub const MAGIC: &[u8; 4] = b"V3D1";
pub const HEADER_LEN: usize = 24;
const DTYPE_F32: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Intensity = 0,
    Labels = 1,
}

fn encode(channels: usize, dims: Dims, kind: Kind, payload: impl Iterator<Item = f32>, path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * channels * dims.voxels());
    buf.extend_from_slice(MAGIC);
    for n in [channels, dims.width, dims.height, dims.depth] {
        let n = u32::try_from(n).map_err(|_| Error::format(path, format!("dimension {n} does not fit in 32 bits")))?;
        buf.extend_from_slice(&n.to_le_bytes());
    }
    buf.extend_from_slice(&[DTYPE_F32, kind as u8, 0, 0]);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn encode_volume(v: &Volume, path: &Path) -> Result<Vec<u8>> {
    encode(v.channels(), v.dims(), Kind::Intensity, v.voxels().iter().copied(), path)
}

pub fn encode_labels(l: &LabelVolume, path: &Path) -> Result<Vec<u8>> {
    encode(1, l.dims(), Kind::Labels, l.labels().iter().map(|&x| x as f32), path)
}

/// Parses a V3D byte buffer; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Kind, Volume)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic, not a V3D file"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let (channels, w, h, d) = (word(0), word(1), word(2), word(3));
    if channels == 0 || w == 0 || h == 0 || d == 0 {
        return Err(Error::format(path, format!("zero dimension in header: {channels} x {w}x{h}x{d}")));
    }
    let (dtype, kind, reserved) = (bytes[20], bytes[21], [bytes[22], bytes[23]]);
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, format!("unsupported dtype code {dtype}")));
    }
    let kind = match kind {
        0 => Kind::Intensity,
        1 => Kind::Labels,
        k => return Err(Error::format(path, format!("unknown kind code {k}"))),
    };
    if reserved != [0, 0] {
        return Err(Error::format(path, "reserved header bytes are not zero"));
    }
    let count = [w, h, d]
        .iter()
        .try_fold(channels, |acc, &n| acc.checked_mul(n))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)));
    let Some((count, payload_len)) = count else {
        return Err(Error::format(path, format!("dimension overflow: {channels} x {w}x{h}x{d}")));
    };
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < payload_len {
        return Err(Error::format(path, format!("truncated payload: {} of {payload_len} bytes", payload.len())));
    }
    if payload.len() > payload_len {
        return Err(Error::format(path, format!("{} trailing bytes after payload", payload.len() - payload_len)));
    }
    let mut voxels = Vec::with_capacity(count);
    voxels.extend(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))));
    if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, format!("non-finite voxel at index {i}")));
    }
    Ok((kind, Volume::new(channels, Dims::new(w, h, d), voxels)?))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_v3d(v: &Volume, path: &Path) -> Result<()> {
    write_bytes(path, &encode_volume(v, path)?)
}

pub fn write_labels_v3d(l: &LabelVolume, path: &Path) -> Result<()> {
    write_bytes(path, &encode_labels(l, path)?)
}

/// Reads an intensity volume. Label files are accepted and returned as
/// floats.
pub fn read_v3d(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes, path)?.1)
}

/// Reads a label file: one channel of integral values in 0..=255.
pub fn read_labels_v3d(path: &Path) -> Result<LabelVolume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (kind, v) = decode(&bytes, path)?;
    if kind != Kind::Labels || v.channels() != 1 {
        return Err(Error::format(path, "not a single-channel label file"));
    }
    let mut labels = Vec::with_capacity(v.len());
    for (i, &x) in v.voxels().iter().enumerate() {
        if x.fract() != 0.0 || !(0.0..=255.0).contains(&x) {
            return Err(Error::format(path, format!("voxel {i} holds {x}, not a label")));
        }
        labels.push(x as u8);
    }
    LabelVolume::new(v.dims(), labels)
}

/// Imports a headerless little-endian f32 array prepared by external
/// tooling, in canonical voxel order.
pub fn import_raw(path: &Path, channels: usize, dims: Dims) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let expect = channels * dims.voxels() * 4;
    if bytes.len() != expect {
        return Err(Error::format(path, format!("raw array has {} bytes, expected {expect}", bytes.len())));
    }
    let voxels = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Volume::new(channels, dims, voxels)
}
