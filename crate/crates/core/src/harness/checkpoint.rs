//! Named-tensor checkpoint archive.
//!
//! Layout (little endian): magic `FSSD`, `u32` version, `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, a `u8` rank, `u32`
//! dims and `f32` values; a CRC32 of all preceding bytes closes the file.
//! The step counter and config hash travel as `meta.*` tensors holding
//! 16-bit chunks, which `f32` represents exactly; the model configuration
//! JSON rides along as one byte per value in `meta.model_config`, so a
//! checkpoint alone is enough to rebuild its detector. Optimiser momentum is
//! stored as `opt.velocity.<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FSSD";
pub const VERSION: u32 = 1;
pub const STEP_KEY: &str = "meta.step";
pub const HASH_KEY: &str = "meta.config_hash";
pub const MODEL_CONFIG_KEY: &str = "meta.model_config";
pub const VELOCITY_PREFIX: &str = "opt.velocity.";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub dims: Vec<u32>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: u64,
    /// JSON of the model configuration that produced the tensors.
    pub model_config: Option<String>,
    pub tensors: BTreeMap<String, NamedTensor>,
}

/// Outcome of loading a checkpoint into a parameter store.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Checkpoint entries with no same-named parameter in the model.
    pub unused: Vec<String>,
    /// Model parameters the checkpoint did not provide.
    pub missing: Vec<String>,
    /// Same name, different shape; left untouched.
    pub shape_mismatch: Vec<String>,
    pub hash_mismatch: bool,
}

fn split_u64(v: u64) -> Vec<f32> {
    (0..4).map(|i| ((v >> (16 * i)) & 0xFFFF) as f32).collect()
}

fn join_u64(v: &[f32]) -> Option<u64> {
    if v.len() != 4 {
        return None;
    }
    v.iter().enumerate().try_fold(0u64, |acc, (i, &x)| {
        (x.fract() == 0.0 && (0.0..65536.0).contains(&x)).then(|| acc | ((x as u64) << (16 * i)))
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity {
                offset: self.pos,
                reason: format!("truncated: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

impl Checkpoint {
    /// Every parameter, buffer and optimiser velocity in `store`.
    pub fn from_store(store: &ParamStore, step: u64, config_hash: u64) -> Checkpoint {
        let mut tensors = BTreeMap::new();
        for (name, p) in store.iter() {
            let dims: Vec<u32> = p.value.shape().iter().map(|&d| d as u32).collect();
            tensors.insert(
                name.to_string(),
                NamedTensor {
                    dims: dims.clone(),
                    values: p.value.data().iter().map(|&v| v as f32).collect(),
                },
            );
            if p.kind == ParamKind::Trainable && !p.velocity.is_empty() {
                tensors.insert(
                    format!("{VELOCITY_PREFIX}{name}"),
                    NamedTensor {
                        dims,
                        values: p.velocity.iter().map(|&v| v as f32).collect(),
                    },
                );
            }
        }
        Checkpoint {
            step,
            config_hash,
            model_config: None,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut all: Vec<(&str, NamedTensor)> = vec![
            (STEP_KEY, NamedTensor { dims: vec![4], values: split_u64(self.step) }),
            (HASH_KEY, NamedTensor { dims: vec![4], values: split_u64(self.config_hash) }),
        ];
        if let Some(json) = &self.model_config {
            all.push((
                MODEL_CONFIG_KEY,
                NamedTensor {
                    dims: vec![json.len() as u32],
                    values: json.bytes().map(f32::from).collect(),
                },
            ));
        }
        all.extend(self.tensors.iter().map(|(k, v)| (k.as_str(), v.clone())));
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(all.len() as u32).to_le_bytes());
        for (name, t) in &all {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Integrity {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Integrity {
                offset: 4,
                reason: format!("unsupported version {version}"),
            });
        }
        let count = r.u32("tensor count")?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let start = r.pos;
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Integrity {
                    offset: start + 2,
                    reason: "name is not UTF-8".into(),
                })?
                .to_string();
            let rank = r.u8("rank")? as usize;
            let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<u32>>>()?;
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize)).ok_or_else(|| {
                Error::Integrity {
                    offset: start,
                    reason: format!("`{name}` is too large"),
                }
            })?;
            let raw = r.take(n.saturating_mul(4), "values")?;
            let values = raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            if tensors.insert(name.clone(), NamedTensor { dims, values }).is_some() {
                return Err(Error::Integrity {
                    offset: start,
                    reason: format!("duplicate tensor `{name}`"),
                });
            }
        }
        let body_end = r.pos;
        let stored = r.u32("crc")?;
        if stored != crc32fast::hash(&bytes[..body_end]) {
            return Err(Error::Integrity {
                offset: body_end,
                reason: "CRC mismatch".into(),
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Integrity {
                offset: r.pos,
                reason: "trailing bytes after CRC".into(),
            });
        }
        let meta = |tensors: &mut BTreeMap<String, NamedTensor>, key: &str| {
            tensors.remove(key).and_then(|t| join_u64(&t.values)).ok_or_else(|| Error::Integrity {
                offset: body_end,
                reason: format!("missing or malformed `{key}`"),
            })
        };
        let step = meta(&mut tensors, STEP_KEY)?;
        let config_hash = meta(&mut tensors, HASH_KEY)?;
        let model_config = match tensors.remove(MODEL_CONFIG_KEY) {
            Some(t) => {
                let bytes: Vec<u8> = t.values.iter().map(|&v| v as u8).collect();
                Some(String::from_utf8(bytes).map_err(|_| Error::Integrity {
                    offset: body_end,
                    reason: format!("`{MODEL_CONFIG_KEY}` is not UTF-8"),
                })?)
            }
            None => None,
        };
        Ok(Checkpoint {
            step,
            config_hash,
            model_config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies every same-named, same-shaped tensor accepted by `filter` into
    /// `store`. Velocities are restored only when `with_optimizer` is set.
    pub fn apply(
        &self,
        store: &mut ParamStore,
        config_hash: u64,
        filter: impl Fn(&str) -> bool,
        with_optimizer: bool,
    ) -> LoadReport {
        let mut report = LoadReport {
            hash_mismatch: config_hash != self.config_hash,
            ..LoadReport::default()
        };
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            if !filter(name) {
                continue;
            }
            let Some(t) = self.tensors.get(name) else {
                report.missing.push(name.clone());
                continue;
            };
            let p = store.get_mut(name).expect("listed name");
            let shape: Vec<u32> = p.value.shape().iter().map(|&d| d as u32).collect();
            if shape != t.dims {
                report.shape_mismatch.push(name.clone());
                continue;
            }
            for (dst, &src) in p.value.data_mut().iter_mut().zip(&t.values) {
                *dst = src as f64;
            }
            if with_optimizer {
                p.velocity = match self.tensors.get(&format!("{VELOCITY_PREFIX}{name}")) {
                    Some(v) => v.values.iter().map(|&x| x as f64).collect(),
                    None => Vec::new(),
                };
            }
            report.loaded.push(name.clone());
        }
        for name in self.tensors.keys() {
            if name.starts_with(VELOCITY_PREFIX) {
                continue;
            }
            if store.get(name).is_none() || !filter(name) {
                report.unused.push(name.clone());
            }
        }
        report
    }

    /// The stored tensor as an `f64` [`Tensor`] padded to rank 4.
    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let t = self.tensors.get(name)?;
        let mut shape = [1usize; 4];
        let r = t.dims.len();
        if r > 4 {
            return None;
        }
        for (i, &d) in t.dims.iter().enumerate() {
            shape[4 - r + i] = d as usize;
        }
        Tensor::from_vec(shape, t.values.iter().map(|&v| v as f64).collect()).ok()
    }
}
