//! Bit-exact binary volume format and the dataset manifest.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       6     magic    b"SSSVOL"
//! 6       2     version  u16 = 1
//! 8       1     kind     0 = intensity volume, 1 = mask
//! 9       1     dtype    0 = f64, 1 = u8
//! 10      12    S, H, W  u32 each
//! 22      4     K        num_classes for masks, 0 for volumes
//! 26      24    spacing  3 x f64 (ignored for masks)
//! 50      ...   payload  S*H*W elements, slice-major row-major
//! ```

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

use super::{MaskVolume, Volume3D};

const MAGIC: &[u8; 6] = b"SSSVOL";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 50;

const KIND_VOLUME: u8 = 0;
const KIND_MASK: u8 = 1;
const DTYPE_F64: u8 = 0;
const DTYPE_U8: u8 = 1;

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset: offset as u64, message: message.into() }
}

fn write_header(buf: &mut Vec<u8>, kind: u8, dtype: u8, dims: (usize, usize, usize), k: u32, spacing: [f64; 3]) {
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(kind);
    buf.push(dtype);
    for d in [dims.0, dims.1, dims.2] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&k.to_le_bytes());
    for s in spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
}

struct Header {
    kind: u8,
    dtype: u8,
    dims: (usize, usize, usize),
    k: u32,
    spacing: [f64; 3],
}

fn read_header(data: &[u8]) -> Result<Header> {
    if data.len() < HEADER_LEN {
        return Err(parse_err(data.len(), format!("file truncated: {} bytes is shorter than the {HEADER_LEN}-byte header", data.len())));
    }
    if &data[0..6] != MAGIC {
        return Err(parse_err(0, format!("bad magic {:02x?}, expected {MAGIC:02x?}", &data[0..6])));
    }
    let version = u16::from_le_bytes([data[6], data[7]]);
    if version != VERSION {
        return Err(parse_err(6, format!("unsupported version {version}")));
    }
    let kind = data[8];
    if kind != KIND_VOLUME && kind != KIND_MASK {
        return Err(parse_err(8, format!("unknown kind {kind}")));
    }
    let dtype = data[9];
    let read_u32 = |off: usize| u32::from_le_bytes(data[off..off + 4].try_into().unwrap());
    let s = read_u32(10) as usize;
    let h = read_u32(14) as usize;
    let w = read_u32(18) as usize;
    let k = read_u32(22);
    let mut spacing = [0.0; 3];
    for (i, sp) in spacing.iter_mut().enumerate() {
        let off = 26 + 8 * i;
        *sp = f64::from_le_bytes(data[off..off + 8].try_into().unwrap());
    }
    Ok(Header { kind, dtype, dims: (s, h, w), k, spacing })
}

pub fn save_volume(path: impl AsRef<Path>, volume: &Volume3D) -> Result<()> {
    let dims = volume.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + dims.0 * dims.1 * dims.2 * 8);
    write_header(&mut buf, KIND_VOLUME, DTYPE_F64, dims, 0, volume.voxel_spacing());
    for v in volume.slices().iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn save_mask(path: impl AsRef<Path>, mask: &MaskVolume) -> Result<()> {
    let dims = mask.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + dims.0 * dims.1 * dims.2);
    write_header(&mut buf, KIND_MASK, DTYPE_U8, dims, mask.num_classes() as u32, [0.0; 3]);
    buf.extend(mask.labels().iter().copied());
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    let data = fs::read(&path)?;
    let header = read_header(&data)?;
    if header.kind != KIND_VOLUME {
        return Err(parse_err(8, "expected an intensity volume, found a mask"));
    }
    if header.dtype != DTYPE_F64 {
        return Err(parse_err(9, format!("volume dtype must be f64 (0), got {}", header.dtype)));
    }
    let (s, h, w) = header.dims;
    let expected = HEADER_LEN + s * h * w * 8;
    if data.len() != expected {
        return Err(parse_err(
            data.len().min(expected),
            format!("payload length {} does not match header dims {s}x{h}x{w} (expected {expected} bytes)", data.len()),
        ));
    }
    let mut values = Vec::with_capacity(s * h * w);
    for chunk in data[HEADER_LEN..].chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    let arr = Array3::from_shape_vec((s, h, w), values).map_err(|e| Error::data(e.to_string()))?;
    Volume3D::new(arr, header.spacing)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskVolume> {
    let data = fs::read(&path)?;
    let header = read_header(&data)?;
    if header.kind != KIND_MASK {
        return Err(parse_err(8, "expected a mask, found an intensity volume"));
    }
    if header.dtype != DTYPE_U8 {
        return Err(parse_err(9, format!("mask dtype must be u8 (1), got {}", header.dtype)));
    }
    let (s, h, w) = header.dims;
    let expected = HEADER_LEN + s * h * w;
    if data.len() != expected {
        return Err(parse_err(
            data.len().min(expected),
            format!("payload length {} does not match header dims {s}x{h}x{w} (expected {expected} bytes)", data.len()),
        ));
    }
    let arr = Array3::from_shape_vec((s, h, w), data[HEADER_LEN..].to_vec())
        .map_err(|e| Error::data(e.to_string()))?;
    MaskVolume::new(arr, header.k as usize)
}

/// One dataset manifest line: `path,split,id`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub split: String,
    pub id: u32,
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.path, r.split, r.id));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(&path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::data(format!("manifest line {}: expected `path,split,id`, got `{line}`", lineno + 1)));
        }
        let id = parts[2]
            .parse::<u32>()
            .map_err(|_| Error::data(format!("manifest line {}: bad id `{}`", lineno + 1, parts[2])))?;
        out.push(ManifestRecord { path: parts[0].to_string(), split: parts[1].to_string(), id });
    }
    Ok(out)
}
