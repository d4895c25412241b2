//! Binary checkpoint format.
//!
//! ```text
//! "LSNF"            4 bytes magic
//! version           u16 LE (currently 1)
//! manifest_len      u32 LE
//! manifest          UTF-8 JSON: topology, tensor names/shapes, seed, config
//! tensor data       f32 LE, each tensor in manifest order
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelSpec, Snapshot};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LSNF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    State,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    pub seed: u64,
    pub config: Option<TrainConfig>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub seed: u64,
    pub config: Option<TrainConfig>,
}

pub fn to_bytes(model: &Model<f32>, seed: u64, config: Option<&TrainConfig>) -> Result<Vec<u8>> {
    let params = model.params();
    let state = model.state();
    let tensors: Vec<TensorEntry> = params
        .iter()
        .map(|(n, p)| (n, TensorKind::Param, &p.value))
        .chain(state.iter().map(|(n, t)| (n, TensorKind::State, *t)))
        .map(|(name, kind, t)| TensorEntry {
            name: name.clone(),
            kind,
            shape: t.shape().to_vec(),
        })
        .collect();
    let manifest = Manifest {
        model: model.spec().clone(),
        tensors,
        seed,
        config: config.cloned(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let manifest_len =
        u32::try_from(json.len()).map_err(|_| CheckpointError::Malformed("manifest too large".into()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + model.parameter_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&manifest_len.to_le_bytes());
    out.extend_from_slice(&json);
    let data = params
        .iter()
        .map(|(_, p)| &p.value)
        .chain(state.iter().map(|(_, t)| *t));
    for t in data {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn truncated(expected: usize, actual: usize) -> Error {
    CheckpointError::Truncated {
        expected: expected as u64,
        actual: actual as u64,
    }
    .into()
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::Magic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        }
        .into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN, bytes.len()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            supported: VERSION,
        }
        .into());
    }
    let manifest_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let data_start = HEADER_LEN + manifest_len;
    if bytes.len() < data_start {
        return Err(truncated(data_start, bytes.len()));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..data_start])
        .map_err(|e| CheckpointError::Malformed(format!("manifest: {e}")))?;

    let floats: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let expected = data_start + floats * 4;
    if bytes.len() != expected {
        if bytes.len() < expected {
            return Err(truncated(expected, bytes.len()));
        }
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - expected
        ))
        .into());
    }

    let mut model = Model::<f32>::from_spec(manifest.model.clone(), manifest.seed)
        .map_err(|e| CheckpointError::Malformed(format!("topology: {e}")))?;
    let names: Vec<(String, TensorKind, Vec<usize>)> = model
        .params()
        .into_iter()
        .map(|(n, p)| (n, TensorKind::Param, p.value.shape().to_vec()))
        .chain(
            model
                .state()
                .into_iter()
                .map(|(n, t)| (n, TensorKind::State, t.shape().to_vec())),
        )
        .collect();
    if names.len() != manifest.tensors.len() {
        return Err(CheckpointError::Malformed(format!(
            "topology has {} tensors, manifest lists {}",
            names.len(),
            manifest.tensors.len()
        ))
        .into());
    }
    for ((name, kind, shape), entry) in names.iter().zip(&manifest.tensors) {
        if *name != entry.name || *kind != entry.kind || *shape != entry.shape {
            return Err(CheckpointError::Malformed(format!(
                "tensor {} {:?} {:?} does not match topology entry {name} {kind:?} {shape:?}",
                entry.name, entry.kind, entry.shape
            ))
            .into());
        }
    }

    let mut offset = data_start;
    let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let vals = bytes[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += n * 4;
        Tensor::from_vec(shape, vals)
    };
    let mut snap = Snapshot {
        params: Vec::new(),
        state: Vec::new(),
    };
    for entry in &manifest.tensors {
        let t = read(&entry.shape)?;
        match entry.kind {
            TensorKind::Param => snap.params.push(t),
            TensorKind::State => snap.state.push(t),
        }
    }
    model.restore(&snap)?;
    Ok(Checkpoint {
        model,
        seed: manifest.seed,
        config: manifest.config,
    })
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_checkpoint(model: &Model<f32>, seed: u64, config: Option<&TrainConfig>, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model, seed, config)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}
