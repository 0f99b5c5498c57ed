//! Binary parameter container.
//!
//! Layout (little-endian): magic `LC3CKPT\0`, `u32` version, `u32`-length
//! UTF-8 configuration echo, `u32` entry count, then per entry a `u32`-length
//! name, `u32` rank, `u64` dims and the `f32` data in row-major order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use lc3net_tensor::{ParamStore, Tensor};

use crate::config::{model_differences, TrainConfig};
use crate::error::{Error, Result};
use crate::model::Lc3Net;

pub const MAGIC: &[u8; 8] = b"LC3CKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, config: impl Into<String>) -> Self {
        Self {
            config: config.into(),
            entries: store
                .entries()
                .iter()
                .map(|e| (e.name.clone(), (*e.value).clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config = r.string()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
            let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Copies entries into `store`. With `prefix`, only names starting with it
    /// are considered on both sides. Nothing is written unless every name and
    /// shape agrees.
    pub fn restore(&self, store: &mut ParamStore, prefix: Option<&str>) -> Result<()> {
        let wanted = |name: &str| prefix.is_none_or(|p| name.starts_with(p));
        let ours: BTreeMap<&str, Vec<usize>> = store
            .entries()
            .iter()
            .filter(|e| wanted(&e.name))
            .map(|e| (e.name.as_str(), e.value.shape().to_vec()))
            .collect();
        let theirs: HashMap<&str, &Tensor> = self
            .entries
            .iter()
            .filter(|(n, _)| wanted(n))
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut problems = Vec::new();
        for (name, shape) in &ours {
            match theirs.get(name) {
                None => problems.push(format!("missing {name}")),
                Some(t) if t.shape() != shape.as_slice() => {
                    problems.push(format!("{name}: expected shape {shape:?}, found {:?}", t.shape()))
                }
                _ => {}
            }
        }
        for name in theirs.keys() {
            if !ours.contains_key(name) {
                problems.push(format!("unexpected {name}"));
            }
        }
        if !problems.is_empty() {
            problems.sort();
            return Err(Error::Checkpoint(format!(
                "{} mismatched parameters: {}",
                problems.len(),
                problems.join("; ")
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = store.entry(id).name.clone();
            if let Some(t) = theirs.get(name.as_str()) {
                *store.value_mut(id) = (*t).clone();
            }
        }
        Ok(())
    }
}

/// Saves the model's parameters along with the full training configuration.
pub fn save_model(model: &Lc3Net, config: &TrainConfig, path: &Path) -> Result<()> {
    Checkpoint::from_store(model.store(), config.to_text()).save(path)
}

/// Loads `ck` into `model`, refusing checkpoints built for another architecture.
pub fn restore_model(model: &mut Lc3Net, ck: &Checkpoint) -> Result<()> {
    let saved = TrainConfig::parse(&ck.config)?;
    let diffs = model_differences(model.config(), &saved.model);
    if !diffs.is_empty() {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture differs from the model: {}",
            diffs.join("; ")
        )));
    }
    ck.restore(model.store_mut(), None)
}

/// Rebuilds the model described by a checkpoint and loads its parameters.
pub fn load_model(path: &Path) -> Result<(Lc3Net, TrainConfig)> {
    let ck = Checkpoint::load(path)?;
    let config = TrainConfig::parse(&ck.config)?;
    let mut model = Lc3Net::new(config.model.clone())?;
    restore_model(&mut model, &ck)?;
    Ok((model, config))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lc3net_tensor::ParamKind;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", ParamKind::ConvWeight, Tensor::from_fn(vec![2, 3], |i| i as f32 * 0.1))
            .unwrap();
        s.add("a.bn.running_var", ParamKind::RunningVar, Tensor::full(vec![3], 1.5))
            .unwrap();
        s
    }

    #[test]
    fn bytes_roundtrip() {
        let ck = Checkpoint::from_store(&store(), "model.bcd_stages = 3\n");
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn truncated_is_rejected() {
        let bytes = Checkpoint::from_store(&store(), "x").to_bytes();
        for cut in [0, 7, 12, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))));
        }
    }

    #[test]
    fn restore_is_all_or_nothing() {
        let mut target = store();
        let mut other = ParamStore::new();
        other
            .add("a.weight", ParamKind::ConvWeight, Tensor::full(vec![2, 3], 9.0))
            .unwrap();
        other
            .add("extra", ParamKind::ConvBias, Tensor::zeros(vec![1]))
            .unwrap();
        let err = Checkpoint::from_store(&other, "").restore(&mut target, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing a.bn.running_var") && msg.contains("unexpected extra"), "{msg}");
        assert_eq!(target.entries()[0].value.data()[1], 0.1);
    }
}
