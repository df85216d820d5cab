//! Binary checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "MDCK" | u32 version
//! u32 len | config text (UTF-8, canonical TOML)
//! u32 T | f64 offset | T x f64 alpha_bar | alpha | beta | sigma   (T = 0: no schedule)
//! 3 tensor sections (parameters, first moments, second moments), each:
//!     u32 count | count x (u32 name len | name | u32 ndims | ndims x u32 | f32 data)
//! u64 step
//! u64 seed | u64 stream | u128 word position
//! u32 loss capacity | u32 len | len x f64 losses
//! ```

use std::io::Write;
use std::path::Path;

use voxdiff_tensor::{ParamStore, Tensor};

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::schedule::Schedule;

pub const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub schedule: Option<Schedule>,
    pub params: ParamStore<f32>,
    pub first_moments: ParamStore<f32>,
    pub second_moments: ParamStore<f32>,
    pub step: u64,
    pub rng: RngState,
    pub loss_capacity: usize,
    pub losses: Vec<f64>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

fn put_store(buf: &mut Vec<u8>, store: &ParamStore<f32>) {
    put_u32(buf, store.len());
    for (name, t) in store.iter() {
        put_u32(buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(buf, t.shape().len());
        for &d in t.shape() {
            put_u32(buf, d);
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut buf, self.config_text.len());
        buf.extend_from_slice(self.config_text.as_bytes());
        match &self.schedule {
            None => {
                put_u32(&mut buf, 0);
                buf.extend_from_slice(&0f64.to_le_bytes());
            }
            Some(s) => {
                put_u32(&mut buf, s.steps());
                buf.extend_from_slice(&s.offset().to_le_bytes());
                for arr in s.arrays() {
                    for v in arr {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        put_store(&mut buf, &self.params);
        put_store(&mut buf, &self.first_moments);
        put_store(&mut buf, &self.second_moments);
        buf.extend_from_slice(&self.step.to_le_bytes());
        buf.extend_from_slice(&self.rng.seed.to_le_bytes());
        buf.extend_from_slice(&self.rng.stream.to_le_bytes());
        buf.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        put_u32(&mut buf, self.loss_capacity);
        put_u32(&mut buf, self.losses.len());
        for v in &self.losses {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| Error::format(path, "config text is not UTF-8"))?;
        let steps = r.u32()? as usize;
        let offset = r.f64()?;
        let schedule = if steps == 0 {
            None
        } else {
            let mut arrays: Vec<Vec<f64>> = Vec::with_capacity(4);
            for _ in 0..4 {
                arrays.push((0..steps).map(|_| r.f64()).collect::<Result<_>>()?);
            }
            Some(Schedule::from_arrays(offset, &arrays[0], &arrays[1], &arrays[2], &arrays[3])?)
        };
        let params = r.store()?;
        let first_moments = r.store()?;
        let second_moments = r.store()?;
        let step = r.u64()?;
        let rng = RngState { seed: r.u64()?, stream: r.u64()?, word_pos: u128::from_le_bytes(r.array()?) };
        let loss_capacity = r.u32()? as usize;
        let n = r.u32()? as usize;
        let losses = (0..n).map(|_| r.f64()).collect::<Result<_>>()?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if !params.same_layout(&first_moments) || !params.same_layout(&second_moments) {
            return Err(Error::format(path, "optimizer moments do not match the parameters"));
        }
        Ok(Self { config_text, schedule, params, first_moments, second_moments, step, rng, loss_capacity, losses })
    }

    /// Atomic write: a temporary sibling is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("mdck.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn store(&mut self) -> Result<ParamStore<f32>> {
        let count = self.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::format(self.path, "tensor name is not UTF-8"))?
                .to_string();
            let ndims = self.u32()? as usize;
            let dims: Vec<usize> = (0..ndims).map(|_| self.u32().map(|d| d as usize)).collect::<Result<_>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).filter(|&n| n <= self.bytes.len() / 4);
            let n = n.ok_or_else(|| Error::format(self.path, format!("tensor {name} has implausible shape {dims:?}")))?;
            let raw = self.take(n * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            store.insert(name, Tensor::from_vec(&dims, data)?);
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::cosine_schedule;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.weight", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.25]).unwrap());
        params.insert("a.bias", Tensor::from_vec(&[2], vec![0.5, f32::MIN_POSITIVE]).unwrap());
        let m = params.zeros_like();
        let mut v = params.zeros_like();
        v.get_mut("a.bias").unwrap().data_mut()[1] = 3.0;
        Checkpoint {
            config_text: "[model]\nname = \"x\"\n".into(),
            schedule: Some(cosine_schedule(10, 0.008).unwrap()),
            params,
            first_moments: m,
            second_moments: v,
            step: 42,
            rng: RngState { seed: 7, stream: 1, word_pos: 1 << 70 },
            loss_capacity: 8,
            losses: vec![0.5, 0.25],
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        let no_schedule = Checkpoint { schedule: None, ..c };
        let b2 = no_schedule.to_bytes();
        assert_eq!(Checkpoint::from_bytes(&b2, Path::new("mem")).unwrap().to_bytes(), b2);
    }

    #[test]
    fn corrupt_inputs_are_reported() {
        let bytes = sample().to_bytes();
        let p = Path::new("mem");
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p).unwrap_err().to_string();
        assert!(err.contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad, p).unwrap_err().to_string().contains("magic"));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra, p).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.mdck");
        sample().save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        loaded.save(&dir.path().join("d.mdck")).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(dir.path().join("d.mdck")).unwrap());
    }
}
