//! Versioned little-endian checkpoint files.
//!
//! Layout: magic `FOGSEG01`, epoch `u64`, seed `u64`, config text
//! (`u32` length + UTF-8), tensor table, optimizer table. A tensor entry is
//! `u32` name length, name, dtype `u8` (0 = f32), rank `u8`, `rank` dims as
//! `u64`, then the values. An optimizer entry is its name, step `u64` and a
//! tensor table of `m/<param>` and `v/<param>` moments.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::ParamRegistry;
use crate::optim::Adam;

pub const MAGIC: &[u8; 8] = b"FOGSEG01";
const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub name: String,
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub epoch: u64,
    pub seed: u64,
    pub config: String,
    pub tensors: Vec<NamedTensor>,
    pub optimizers: Vec<OptimizerState>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, ts: &[NamedTensor]) {
    out.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in ts {
        put_str(out, &t.name);
        out.push(DTYPE_F32);
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.at)))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))
    }

    fn tensors(&mut self) -> Result<Vec<NamedTensor>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name = self.string()?;
            let dtype = self.u8()?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype tag {dtype}")));
            }
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let count = count.ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
            let bytes = self.take(count.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            out.push(NamedTensor { name, shape, data });
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn new(epoch: u64, seed: u64, config: impl Into<String>) -> Self {
        Checkpoint {
            epoch,
            seed,
            config: config.into(),
            ..Default::default()
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.config);
        put_tensors(&mut out, &self.tensors);
        out.extend_from_slice(&(self.optimizers.len() as u32).to_le_bytes());
        for o in &self.optimizers {
            put_str(&mut out, &o.name);
            out.extend_from_slice(&o.step.to_le_bytes());
            put_tensors(&mut out, &o.tensors);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, at: 0 };
        if r.take(8).ok() != Some(&MAGIC[..]) {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let config = r.string()?;
        let tensors = r.tensors()?;
        let n = r.u32()? as usize;
        let mut optimizers = Vec::new();
        for _ in 0..n {
            let name = r.string()?;
            let step = r.u64()?;
            optimizers.push(OptimizerState {
                name,
                step,
                tensors: r.tensors()?,
            });
        }
        if r.at != buf.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.at)));
        }
        Ok(Checkpoint {
            epoch,
            seed,
            config,
            tensors,
            optimizers,
        })
    }

    /// Writes through a temporary file so readers never see partial data.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    /// Appends every parameter and buffer of `reg`.
    pub fn add_registry(&mut self, reg: &ParamRegistry<f32>) {
        for (name, t) in reg.named_tensors() {
            self.tensors.push(NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            });
        }
    }

    /// Fills `reg` from entries whose names start with `prefix`. The two
    /// name sets must coincide.
    pub fn load_registry(&self, reg: &mut ParamRegistry<f32>, prefix: &str) -> Result<()> {
        let mine: Vec<&NamedTensor> = self.tensors.iter().filter(|t| t.name.starts_with(prefix)).collect();
        let expected: Vec<String> = reg.named_tensors().map(|(n, _)| n.to_string()).collect();
        if mine.len() != expected.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors under {prefix:?} in checkpoint, model has {}",
                mine.len(),
                expected.len()
            )));
        }
        for t in mine {
            reg.set(&t.name, &t.data, &t.shape).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(())
    }

    pub fn add_optimizer(&mut self, name: &str, opt: &Adam, reg: &ParamRegistry<f32>) {
        let (m, v) = opt.moments();
        let mut tensors = Vec::new();
        for (kind, bufs) in [("m", m), ("v", v)] {
            for ((pname, t), data) in reg.iter().zip(bufs) {
                tensors.push(NamedTensor {
                    name: format!("{kind}/{pname}"),
                    shape: t.shape().to_vec(),
                    data: data.clone(),
                });
            }
        }
        self.optimizers.push(OptimizerState {
            name: name.to_string(),
            step: opt.steps(),
            tensors,
        });
    }

    pub fn optimizer(&self, name: &str) -> Option<&OptimizerState> {
        self.optimizers.iter().find(|o| o.name == name)
    }

    pub fn restore_optimizer(&self, name: &str, opt: &mut Adam, reg: &ParamRegistry<f32>) -> Result<()> {
        let st = self
            .optimizer(name)
            .ok_or_else(|| Error::Checkpoint(format!("no optimizer state {name:?}")))?;
        let lookup = |kind: &str| {
            reg.iter()
                .map(|(pname, _)| {
                    let key = format!("{kind}/{pname}");
                    st.tensors
                        .iter()
                        .find(|t| t.name == key)
                        .map(|t| t.data.clone())
                        .ok_or_else(|| Error::Checkpoint(format!("optimizer {name:?} lacks {key}")))
                })
                .collect::<Result<Vec<_>>>()
        };
        opt.restore(st.step, lookup("m")?, lookup("v")?)
    }
}

/// Per-epoch files `<kind>_epoch_NNNN.ckpt` plus a `<kind>_latest` pointer.
pub struct CheckpointDir {
    pub dir: PathBuf,
    pub kind: String,
    pub keep_last: usize,
}

impl CheckpointDir {
    pub fn new(dir: impl Into<PathBuf>, kind: &str, keep_last: usize) -> Self {
        CheckpointDir {
            dir: dir.into(),
            kind: kind.to_string(),
            keep_last: keep_last.max(1),
        }
    }

    fn epoch_file(&self, epoch: u64) -> PathBuf {
        self.dir.join(format!("{}_epoch_{epoch:04}.ckpt", self.kind))
    }

    pub fn pointer(&self) -> PathBuf {
        self.dir.join(format!("{}_latest", self.kind))
    }

    /// Saves, moves the pointer, then prunes old epochs.
    pub fn save(&self, ck: &Checkpoint) -> Result<PathBuf> {
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let path = self.epoch_file(ck.epoch);
        ck.save(&path)?;
        let name = path.file_name().expect("file name").to_string_lossy().into_owned();
        let ptr = self.pointer();
        fs::write(&ptr, format!("{name}\n")).map_err(|e| Error::io(&ptr, e))?;
        if ck.epoch >= self.keep_last as u64 {
            let stale = self.epoch_file(ck.epoch - self.keep_last as u64);
            if stale.exists() {
                fs::remove_file(&stale).map_err(|e| Error::io(&stale, e))?;
            }
        }
        Ok(path)
    }

    /// Path named by the pointer file, if any.
    pub fn latest(&self) -> Result<Option<PathBuf>> {
        let ptr = self.pointer();
        if !ptr.exists() {
            return Ok(None);
        }
        let name = fs::read_to_string(&ptr).map_err(|e| Error::io(&ptr, e))?;
        Ok(Some(self.dir.join(name.trim())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(3, 42, "[run]\nseed = 42\n");
        c.tensors.push(NamedTensor {
            name: "a.weight".into(),
            shape: vec![2, 1],
            data: vec![1.5, -2.0],
        });
        c.tensors.push(NamedTensor {
            name: "s".into(),
            shape: vec![],
            data: vec![0.25],
        });
        c.optimizers.push(OptimizerState {
            name: "seg".into(),
            step: 7,
            tensors: vec![],
        });
        c
    }

    #[test]
    fn byte_round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..8], b"FOGSEG01");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
