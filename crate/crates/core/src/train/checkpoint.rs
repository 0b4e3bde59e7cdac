//! Binary checkpoint format.
//!
//! ```text
//! "BCNN"                      magic
//! u32                         format version
//! u64 + bytes                 config snapshot (JSON)
//! u64                         completed epochs
//! u64                         optimizer step
//! u32                         tensor count
//! per tensor:
//!   u32 + bytes               name (UTF-8)
//!   u8                        dtype: 1 = f64, 0 = f32
//!   u32, u64 * ndim           shape
//!   raw little-endian values
//! ```
//!
//! All integers are little-endian. Model parameters come first, followed
//! by the Adam moments as `adam.m.<name>` and `adam.v.<name>`.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::adam::AdamState;
use super::config::TrainConfig;
use super::write_atomic;
use crate::error::{Error, Result};
use crate::zoo::Model;
use crate::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"BCNN";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epoch: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn capture(config: &TrainConfig, epoch: u64, model: &Model, adam: &AdamState) -> Self {
        Checkpoint {
            config: config.clone(),
            epoch,
            params: model.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
            adam: adam.clone(),
        }
    }

    /// Rebuilds the model described by the config snapshot and loads the
    /// stored parameters into it.
    pub fn model(&self) -> Result<Model> {
        let mut model = self.config.build_model()?;
        model.load_params(self.params.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config)?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.adam.step.to_le_bytes());

        let mut table: Vec<(String, &Tensor)> = self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if self.adam.m.len() != self.params.len() || self.adam.v.len() != self.params.len() {
            return Err(Error::Consistency("optimizer moments do not match parameters".into()));
        }
        for ((name, _), m) in self.params.iter().zip(&self.adam.m) {
            table.push((format!("adam.m.{name}"), m));
        }
        for ((name, _), v) in self.params.iter().zip(&self.adam.v) {
            table.push((format!("adam.v.{name}"), v));
        }
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for (name, t) in table {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.format("missing BCNN magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.format(&format!("unsupported version {version}")));
        }
        let cfg_len = r.u64()? as usize;
        let config: TrainConfig = serde_json::from_slice(r.take(cfg_len)?)?;
        let epoch = r.u64()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.format("tensor name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let shape: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<Real> = match dtype {
                DTYPE_F64 => r.take(n * 8)?.chunks_exact(8).map(|c| Real::from_le_bytes(c.try_into().unwrap())).collect(),
                DTYPE_F32 => r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
                    .collect(),
                other => return Err(r.format(&format!("unknown dtype tag {other} for {name}"))),
            };
            tensors.push((name, Tensor::new(&shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(r.format(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in tensors {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                m.push((rest.to_string(), t));
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                v.push((rest.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        let aligned = |moments: &[(String, Tensor)]| {
            moments.len() == params.len()
                && moments
                    .iter()
                    .zip(&params)
                    .all(|((a, x), (b, y))| a == b && x.shape() == y.shape())
        };
        if !aligned(&m) || !aligned(&v) {
            return Err(r.format("optimizer moments do not match parameters"));
        }
        let mut adam = AdamState::new(params.iter().map(|(_, t)| t));
        adam.step = step;
        adam.m = m.into_iter().map(|(_, t)| t).collect();
        adam.v = v.into_iter().map(|(_, t)| t).collect();
        Ok(Checkpoint {
            config,
            epoch,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, |f| f.write_all(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(Error::Length {
            path: self.path.to_path_buf(),
            expected: self.pos.saturating_add(n),
            found: self.bytes.len(),
        })?;
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

    fn format(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.to_string(),
        }
    }
}
