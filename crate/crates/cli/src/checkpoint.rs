//! FJLCK1 checkpoint files.
//!
//! Layout: `"FJLCK1"`, `u16` major and `u16` minor version (LE), `u32` LE
//! header length, a JSON header (model config, parameter name/shape table,
//! run metadata), the parameters as LE `f64` in table order, and an LE `u64`
//! FNV-1a checksum of the payload bytes.

use std::collections::BTreeMap;
use std::path::Path;

use fjl_core::digest::fnv1a64;
use fjl_core::model::{ModelConfig, ModelParams};
use fjl_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"FJLCK1";
pub const VERSION_MAJOR: u16 = 1;
/// Minor 1 added the run metadata block.
pub const VERSION_MINOR: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunMeta {
    pub round: Option<u32>,
    pub pck: Option<f64>,
    pub seed: Option<u64>,
    pub test_fraction: Option<f64>,
    pub loss: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub model: ModelConfig,
    pub params: Vec<ParamEntry>,
    #[serde(default)]
    pub meta: RunMeta,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: (u16, u16),
    pub header: Header,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(params: &ModelParams, meta: RunMeta) -> Self {
        Self {
            version: (VERSION_MAJOR, VERSION_MINOR),
            header: Header {
                model: params.config().clone(),
                params: params
                    .iter()
                    .map(|(name, t)| ParamEntry {
                        name: name.clone(),
                        shape: t.shape().to_vec(),
                    })
                    .collect(),
                meta,
            },
            tensors: params.iter().map(|(n, t)| (n.clone(), t.clone())).collect(),
        }
    }

    /// Parameters under the stored model config.
    pub fn params(&self) -> CliResult<ModelParams> {
        self.params_for(&self.header.model)
    }

    /// Parameters under `config`; a layout mismatch names the first
    /// offending parameter.
    pub fn params_for(&self, config: &ModelConfig) -> CliResult<ModelParams> {
        ModelParams::from_tensors(config, self.tensors.clone())
            .map_err(|e| CliError::Runtime(format!("checkpoint does not match the model config: {e}")))
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut payload = Vec::with_capacity(8 * self.num_params());
        for entry in &self.header.params {
            for v in self.tensors[&entry.name].data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = Vec::with_capacity(payload.len() + header.len() + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.0.to_le_bytes());
        out.extend_from_slice(&self.version.1.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a64(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        let corrupt = |what: &str| CliError::Runtime(format!("corrupt checkpoint: {what}"));
        let fixed = CHECKPOINT_MAGIC.len() + 8;
        if bytes.len() < fixed || &bytes[..6] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let major = u16::from_le_bytes([bytes[6], bytes[7]]);
        let minor = u16::from_le_bytes([bytes[8], bytes[9]]);
        if major != VERSION_MAJOR || minor > VERSION_MINOR {
            return Err(CliError::Runtime(format!(
                "checkpoint version {major}.{minor} is newer than supported {VERSION_MAJOR}.{VERSION_MINOR}"
            )));
        }
        if minor < VERSION_MINOR {
            log::warn!("checkpoint version {major}.{minor} is older than {VERSION_MAJOR}.{VERSION_MINOR}; loading anyway");
        }
        let header_len = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let header_end = fixed
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[fixed..header_end]).map_err(|e| corrupt(&format!("header: {e}")))?;

        let n: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        let payload_end = header_end + 8 * n;
        if bytes.len() != payload_end + 8 {
            return Err(corrupt(&format!(
                "expected {} bytes, found {}",
                payload_end + 8,
                bytes.len()
            )));
        }
        let payload = &bytes[header_end..payload_end];
        let stored = u64::from_le_bytes(bytes[payload_end..].try_into().unwrap());
        if fnv1a64(payload) != stored {
            return Err(corrupt("checksum mismatch"));
        }

        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut tensors = BTreeMap::new();
        for entry in &header.params {
            let len = entry.shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(len).collect();
            let t = Tensor::new(entry.shape.clone(), data).map_err(|e| corrupt(&e.to_string()))?;
            if tensors.insert(entry.name.clone(), t).is_some() {
                return Err(corrupt(&format!("duplicate parameter {}", entry.name)));
            }
        }
        Ok(Self {
            version: (major, minor),
            header,
            tensors,
        })
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ck.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Runtime(format!("cannot read checkpoint {}: {e}", path.display())))?;
    Checkpoint::from_bytes(&bytes)
}
