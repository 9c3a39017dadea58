//! Self-describing checkpoint: magic, descriptor length (u64 LE), JSON
//! descriptor, then every parameter tensor in declaration order as f32 LE.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::FlowArch;
use super::model::FlowModel;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FLOWLAB1";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Descriptor {
    format_version: u32,
    arch: FlowArch,
    d_z: usize,
    params: Vec<ParamEntry>,
    train_config: Option<serde_json::Value>,
}

impl FlowModel<f32> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let ps = self.params();
        let desc = Descriptor {
            format_version: FORMAT_VERSION,
            arch: self.arch().clone(),
            d_z: self.d_z(),
            params: ps
                .names()
                .iter()
                .zip(ps.tensors())
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            train_config: self.train_echo.clone(),
        };
        let json = serde_json::to_vec(&desc)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * ps.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in ps.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; the descriptor is validated before any parameter is read.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a flow checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if len > body.len() {
            return Err(bad("truncated descriptor".into()));
        }
        let desc: Descriptor =
            serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("bad descriptor: {e}")))?;
        if desc.format_version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", desc.format_version)));
        }
        desc.arch.validate().map_err(|e| bad(e.to_string()))?;
        if desc.d_z != desc.arch.d_z {
            return Err(bad("d_z disagrees with the architecture".into()));
        }
        let mut model = FlowModel::<f32>::new(desc.arch, 0)?;
        let ps = model.params();
        if ps.len() != desc.params.len()
            || ps
                .names()
                .iter()
                .zip(ps.tensors())
                .zip(&desc.params)
                .any(|((n, t), e)| *n != e.name || t.shape() != e.shape.as_slice())
        {
            return Err(bad("parameter list does not match the architecture".into()));
        }
        let data = &body[len..];
        if data.len() != 4 * ps.num_scalars() {
            return Err(bad(format!(
                "expected {} parameter bytes, found {}",
                4 * ps.num_scalars(),
                data.len()
            )));
        }
        let flat: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        model.params_mut().assign_flat(&flat);
        if !model.params().all_finite() {
            return Err(bad("non-finite parameters".into()));
        }
        model.train_echo = desc.train_config;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Training configuration recorded with the model, if any.
    pub fn train_config_echo(&self) -> Option<&serde_json::Value> {
        self.train_echo.as_ref()
    }
}
