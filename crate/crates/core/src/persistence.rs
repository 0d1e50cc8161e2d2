//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `NAMSCKPT` |
//! | 4 | format version (u32) |
//! | 8 | header length `H` (u64) |
//! | H | JSON header: configs, pole ids, prune log, best epoch, tensor table |
//! | 8·Σ rows·cols | float64 tensor data in table order, row-major |
//!
//! Nothing follows the last tensor.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ParamStore, Tensor};
use crate::model::{ModelConfig, ModelError, NamsModel, SIGNAL_LEN};
use crate::spherical::Vec3;
use crate::trainer::{PruneEvent, TrainConfig};

pub const MAGIC: [u8; 8] = *b"NAMSCKPT";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads version {FORMAT_VERSION}")]
    Version { found: u32 },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("tensor data is {found} bytes, shape table declares {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
}

/// A trained model with the configuration and history that produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: NamsModel,
    pub prune_events: Vec<PruneEvent>,
    pub best_epoch: Option<usize>,
    pub best_test_loss: f64,
}

impl Checkpoint {
    pub fn new(
        config: &TrainConfig,
        model: NamsModel,
        prune_events: &[PruneEvent],
        best_epoch: Option<usize>,
        best_test_loss: f64,
    ) -> Self {
        Self {
            config: *config,
            model,
            prune_events: prune_events.to_vec(),
            best_epoch,
            best_test_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    train_config: TrainConfig,
    model_config: ModelConfig,
    source: Vec3,
    initial_count: usize,
    pole_ids: Vec<usize>,
    prune_events: Vec<PruneEvent>,
    best_epoch: Option<usize>,
    /// Stored as raw bits so NaN survives.
    best_test_loss_bits: u64,
    optimizer_step: u64,
    tensors: Vec<TensorEntry>,
}

/// Serializes to the checkpoint byte layout. Optimizer moments are not stored.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let store = &ckpt.model.store;
    let ids: Vec<_> = store.ids().collect();
    let header = Header {
        train_config: ckpt.config,
        model_config: ckpt.model.config,
        source: ckpt.model.source(),
        initial_count: ckpt.model.initial_count(),
        pole_ids: ckpt.model.pole_ids().to_vec(),
        prune_events: ckpt.prune_events.clone(),
        best_epoch: ckpt.best_epoch,
        best_test_loss_bits: ckpt.best_test_loss.to_bits(),
        optimizer_step: store.step(),
        tensors: ids
            .iter()
            .map(|&id| {
                let (rows, cols) = store.value(id).shape();
                TensorEntry {
                    name: store.name(id).to_string(),
                    rows,
                    cols,
                }
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header is always serializable");
    let mut out = Vec::with_capacity(PREFIX_LEN + json.len() + 8 * store.num_scalars());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in ids {
        for v in store.value(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, PersistError> {
    if bytes.len() < MAGIC.len() || bytes[..MAGIC.len()] != MAGIC {
        return Err(PersistError::BadMagic);
    }
    if bytes.len() < PREFIX_LEN {
        return Err(PersistError::Truncated(format!(
            "{} byte file has no complete prefix",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(PersistError::Version { found: version });
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(PREFIX_LEN))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| PersistError::Truncated(format!("header of {header_len} bytes does not fit")))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX_LEN..header_end]).map_err(|e| PersistError::Header(e.to_string()))?;

    let blob = &bytes[header_end..];
    let expected = header
        .tensors
        .iter()
        .try_fold(0usize, |acc, t| {
            t.rows
                .checked_mul(t.cols)
                .and_then(|n| n.checked_mul(8))
                .and_then(|n| acc.checked_add(n))
        })
        .ok_or_else(|| PersistError::Header("tensor table overflows".into()))?;
    if blob.len() != expected {
        return Err(PersistError::LengthMismatch {
            expected,
            found: blob.len(),
        });
    }

    let mut store = ParamStore::new();
    let mut offset = 0;
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let data = blob[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += 8 * n;
        store.add(t.name.clone(), Tensor::from_vec(t.rows, t.cols, data));
    }
    store.set_step(header.optimizer_step);
    check_shapes(&header)?;
    let model = NamsModel::from_parts(
        header.model_config,
        store,
        header.pole_ids,
        header.initial_count,
        header.source,
    )
    .map_err(|e: ModelError| PersistError::Inconsistent(e.to_string()))?;
    Ok(Checkpoint {
        config: header.train_config,
        model,
        prune_events: header.prune_events,
        best_epoch: header.best_epoch,
        best_test_loss: f64::from_bits(header.best_test_loss_bits),
    })
}

fn check_shapes(h: &Header) -> Result<(), PersistError> {
    let w = h.model_config.hidden_width;
    let channels = h.model_config.channels();
    let posenc = crate::autodiff::POSENC_DIM;
    let alive = h.pole_ids.len();
    let mut expected = vec![("poles.position".to_string(), alive, 3)];
    for (prefix, dims) in [
        ("signal", [posenc, w, w, SIGNAL_LEN]),
        ("directivity", [2 * posenc, w, w, channels * SIGNAL_LEN]),
    ] {
        for l in 0..3 {
            expected.push((format!("{prefix}.{l}.weight"), dims[l], dims[l + 1]));
            expected.push((format!("{prefix}.{l}.bias"), 1, dims[l + 1]));
        }
    }
    for (name, rows, cols) in expected {
        let t = h
            .tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| PersistError::Inconsistent(format!("missing tensor `{name}`")))?;
        if (t.rows, t.cols) != (rows, cols) {
            return Err(PersistError::Inconsistent(format!(
                "tensor `{name}` is {}x{}, expected {rows}x{cols}",
                t.rows, t.cols
            )));
        }
    }
    if alive == 0 {
        return Err(PersistError::Inconsistent("no alive poles".into()));
    }
    if h.pole_ids.iter().any(|&i| i >= h.initial_count) || h.pole_ids.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PersistError::Inconsistent("pole ids out of range or unordered".into()));
    }
    Ok(())
}

/// Writes atomically: a temporary file in the target directory is renamed
/// over `path`.
pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<(), PersistError> {
    let io = |source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(&to_bytes(ckpt)).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, PersistError> {
    let bytes = std::fs::read(path).map_err(|source| PersistError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
