//! Named-tensor checkpoint archive.
//!
//! Layout (little-endian): magic `SSSCKPT1`, version u16, config-hash string
//! (u16 length + UTF-8 bytes), step u64, seed u64, loss history (u64 count +
//! f64 values), then four tensor sections in order: student, teacher, first
//! moments, second moments. Each section is a u32 entry count followed by
//! entries of (u16 name length, name, u8 ndim, u32 dims..., f64 data...).
//! Loading refuses archives whose config hash does not match the caller's.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::backbone::ModelParams;
use crate::error::{Error, Result};
use crate::trainer::{Moments, TrainState};

const MAGIC: &[u8; 8] = b"SSSCKPT1";
const VERSION: u16 = 1;

fn write_tensor_map(buf: &mut Vec<u8>, map: &BTreeMap<String, ArrayD<f64>>) {
    buf.extend_from_slice(&(map.len() as u32).to_le_bytes());
    for (name, tensor) in map {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(tensor.ndim() as u8);
        for d in tensor.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in tensor.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Parse {
                offset: self.pos as u64,
                message: format!("truncated checkpoint while reading {what}"),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn tensor_map(&mut self) -> Result<BTreeMap<String, ArrayD<f64>>> {
        let count = self.u32("tensor count")?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let name_len = self.u16("tensor name length")? as usize;
            let name = String::from_utf8(self.take(name_len, "tensor name")?.to_vec())
                .map_err(|_| Error::Parse { offset: self.pos as u64, message: "tensor name is not UTF-8".into() })?;
            let ndim = self.take(1, "tensor rank")?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(self.u32("tensor dim")? as usize);
            }
            let len: usize = dims.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(self.f64("tensor value")?);
            }
            let tensor = ArrayD::from_shape_vec(IxDyn(&dims), values)
                .map_err(|e| Error::data(e.to_string()))?;
            out.insert(name, tensor);
        }
        Ok(out)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, state: &TrainState, config_hash: &str) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_hash.len() as u16).to_le_bytes());
    buf.extend_from_slice(config_hash.as_bytes());
    buf.extend_from_slice(&state.step.to_le_bytes());
    buf.extend_from_slice(&state.seed.to_le_bytes());
    buf.extend_from_slice(&(state.loss_history.len() as u64).to_le_bytes());
    for v in &state.loss_history {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_tensor_map(&mut buf, state.student.tensor_map());
    write_tensor_map(&mut buf, state.teacher.tensor_map());
    write_tensor_map(&mut buf, &state.moments.m);
    write_tensor_map(&mut buf, &state.moments.v);
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected_hash: &str) -> Result<TrainState> {
    let data = fs::read(&path)?;
    let mut r = Reader { data: &data, pos: 0 };
    let magic = r.take(8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse { offset: 0, message: format!("bad checkpoint magic {magic:02x?}") });
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Parse { offset: 8, message: format!("unsupported checkpoint version {version}") });
    }
    let hash_len = r.u16("hash length")? as usize;
    let hash = String::from_utf8(r.take(hash_len, "config hash")?.to_vec())
        .map_err(|_| Error::Parse { offset: r.pos as u64, message: "config hash is not UTF-8".into() })?;
    if hash != expected_hash {
        return Err(Error::Config(format!(
            "checkpoint was produced under config hash {hash}, current config hashes to {expected_hash}"
        )));
    }
    let step = r.u64("step")?;
    let seed = r.u64("seed")?;
    let hist_len = r.u64("loss history length")? as usize;
    let mut loss_history = Vec::with_capacity(hist_len);
    for _ in 0..hist_len {
        loss_history.push(r.f64("loss history entry")?);
    }
    let student = ModelParams::from_map(r.tensor_map()?);
    let teacher = ModelParams::from_map(r.tensor_map()?);
    let m = r.tensor_map()?;
    let v = r.tensor_map()?;
    if r.pos != data.len() {
        return Err(Error::Parse { offset: r.pos as u64, message: "trailing bytes after checkpoint payload".into() });
    }
    Ok(TrainState { student, teacher, moments: Moments { m, v }, step, seed, loss_history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn state() -> TrainState {
        let bb = BackboneConfig { level_channels: vec![2, 3], ..Default::default() };
        let mut s = TrainState::new(&bb, 9).unwrap();
        s.step = 42;
        s.loss_history = vec![1.5, 1.25, 1.0];
        s
    }

    #[test]
    fn round_trip_preserves_everything() {
        let s = state();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.sssckpt");
        save_checkpoint(&p, &s, "deadbeef01234567").unwrap();
        let loaded = load_checkpoint(&p, "deadbeef01234567").unwrap();
        assert_eq!(loaded.step, 42);
        assert_eq!(loaded.seed, 9);
        assert_eq!(loaded.loss_history, s.loss_history);
        assert_eq!(loaded.student, s.student);
        assert_eq!(loaded.teacher, s.teacher);
    }

    #[test]
    fn hash_mismatch_refused() {
        let s = state();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.sssckpt");
        save_checkpoint(&p, &s, "aaaa").unwrap();
        let err = load_checkpoint(&p, "bbbb").unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let s = state();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ck.sssckpt");
        save_checkpoint(&p, &s, "aaaa").unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&p, "aaaa"), Err(Error::Parse { .. })));
    }
}
