//! Checkpoint file: `u32 manifest length | manifest JSON | f32 payload`,
//! little-endian. The manifest maps every parameter name to its element
//! offset and shape and embeds the run configuration.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub step: usize,
    pub params: BTreeMap<String, Entry>,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: usize,
    pub config: serde_json::Value,
    pub params: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(step: usize, config: serde_json::Value) -> Self {
        Checkpoint {
            step,
            config,
            params: BTreeMap::new(),
        }
    }

    /// Add every parameter of `set` under `prefix.`.
    pub fn add_group<S: Scalar>(&mut self, prefix: &str, set: &ParamSet<S>) {
        for (name, t) in set.iter() {
            self.params.insert(format!("{prefix}.{name}"), t.cast());
        }
    }

    pub fn has_group(&self, prefix: &str) -> bool {
        let p = format!("{prefix}.");
        self.params.keys().any(|k| k.starts_with(&p))
    }

    /// Overwrite `set` from the `prefix.` group; shapes and names must match.
    pub fn restore_group<S: Scalar>(&self, prefix: &str, set: &mut ParamSet<S>) -> Result<()> {
        let p = format!("{prefix}.");
        let n_ckpt = self.params.keys().filter(|k| k.starts_with(&p)).count();
        if n_ckpt != set.len() {
            return Err(Error::Shape(format!(
                "checkpoint group '{prefix}' has {n_ckpt} tensors, model expects {}",
                set.len()
            )));
        }
        for id in 0..set.len() {
            let key = format!("{p}{}", set.name(id));
            let t = self
                .params
                .get(&key)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks parameter '{key}'")))?;
            if t.shape() != set.get(id).shape() {
                return Err(Error::Shape(format!(
                    "parameter '{key}': checkpoint dims {:?}, model dims {:?}",
                    t.shape(),
                    set.get(id).shape()
                )));
            }
            *set.get_mut(id) = t.cast();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut params = BTreeMap::new();
        let mut offset = 0;
        for (k, t) in &self.params {
            params.insert(
                k.clone(),
                Entry {
                    offset,
                    shape: t.shape().to_vec(),
                },
            );
            offset += t.len();
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            step: self.step,
            params,
            config: self.config.clone(),
        };
        let m = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(4 + m.len() + 4 * offset);
        out.extend_from_slice(&(m.len() as u32).to_le_bytes());
        out.extend_from_slice(&m);
        for t in self.params.values() {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |offset: usize, msg: String| Error::Format {
            offset: offset as u64,
            msg,
        };
        if bytes.len() < 4 {
            return Err(fmt(0, "truncated manifest length".into()));
        }
        let mlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let mend = 4usize
            .checked_add(mlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fmt(4, format!("manifest of {mlen} bytes exceeds file")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[4..mend])
            .map_err(|e| fmt(4, format!("bad manifest: {e}")))?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(fmt(4, format!("unsupported checkpoint version {}", manifest.version)));
        }
        let payload = &bytes[mend..];
        let mut params = BTreeMap::new();
        let mut total = 0;
        for (k, e) in manifest.params {
            let n: usize = e.shape.iter().product();
            let (a, b) = (e.offset * 4, (e.offset + n) * 4);
            if b > payload.len() {
                return Err(fmt(mend + a, format!("payload truncated in '{k}'")));
            }
            let data = payload[a..b]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(k, Tensor::new(e.shape, data)?);
            total += n;
        }
        if total * 4 != payload.len() {
            return Err(fmt(mend + total * 4, "trailing payload bytes".into()));
        }
        Ok(Checkpoint {
            step: manifest.step,
            config: manifest.config,
            params,
        })
    }

    /// Write via a temporary file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
