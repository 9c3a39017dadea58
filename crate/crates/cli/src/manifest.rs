//! Run manifest: what each stage produced, with content digests, and the
//! command that reproduces it.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const TOOL: &str = "flowlab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Digest of the stage's resolved settings and its input digests.
    pub key: String,
    /// Equivalent stand-alone invocation, relative to the output directory's parent.
    pub command: Vec<String>,
    pub outputs: Vec<OutputRecord>,
    pub seconds: f64,
    pub skipped: bool,
}

impl StageRecord {
    pub fn output(&self, rel: &str) -> Option<&OutputRecord> {
        self.outputs.iter().find(|o| o.path == rel)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
}

impl ExperimentManifest {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            tool: TOOL.into(),
            version: VERSION.into(),
            config,
            stages: Vec::new(),
        }
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let raw = fs::read(path).map_err(|e| CliError::validation(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_slice(&raw).map_err(|e| CliError::validation(format!("bad manifest {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self).expect("manifest serialises"))
    }

    /// Checks every listed output against the files under `root`; returns the mismatches.
    pub fn verify(&self, root: &Path) -> Vec<String> {
        self.stages
            .iter()
            .flat_map(|s| &s.outputs)
            .filter(|o| !output_matches(root, o))
            .map(|o| o.path.clone())
            .collect()
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<(String, u64)> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut n = 0u64;
    loop {
        let k = f.read(&mut buf)?;
        if k == 0 {
            break;
        }
        h.update(&buf[..k]);
        n += k as u64;
    }
    Ok((hex::encode(h.finalize()), n))
}

pub fn record_output(root: &Path, rel: &str) -> std::io::Result<OutputRecord> {
    let (sha256, bytes) = sha256_file(&root.join(rel))?;
    Ok(OutputRecord {
        path: rel.to_string(),
        sha256,
        bytes,
    })
}

pub fn output_matches(root: &Path, o: &OutputRecord) -> bool {
    matches!(sha256_file(&root.join(&o.path)), Ok((d, n)) if d == o.sha256 && n == o.bytes)
}

/// Stage key over a name, a serialisable settings value and input digests.
pub fn stage_key<T: Serialize>(name: &str, settings: &T, inputs: &[&str]) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(settings).expect("settings serialise"));
    for d in inputs {
        h.update([0]);
        h.update(d.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Combined digest of a stage's outputs, used as an input digest downstream.
pub fn outputs_digest(rec: &StageRecord) -> String {
    let mut h = Sha256::new();
    for o in &rec.outputs {
        h.update(o.path.as_bytes());
        h.update([0]);
        h.update(o.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn rel_string(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

pub fn display(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}
