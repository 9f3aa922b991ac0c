//! Reasoner checkpoints as self-describing JSON.
//!
//! Floats are written in shortest round-trip form and parsed exactly, so
//! saving and loading reproduces every parameter bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use patchtrace_core::reasoner::{HeadMode, Reasoner, ReasonerConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigRecord {
    num_categories: usize,
    seq_len: usize,
    d_model: usize,
    n_layers: usize,
    n_heads: usize,
    head_layers: usize,
    head_mode: String,
    init_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    group: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    config: ConfigRecord,
    #[serde(rename = "P")]
    patches: usize,
    #[serde(rename = "T")]
    samples_per_patch: usize,
    temperature: f64,
    tensors: Vec<TensorRecord>,
}

const FORMAT: &str = "patchtrace-reasoner-v1";

/// A trained reasoner and the trace settings it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Reasoner,
    pub patches: usize,
    pub samples_per_patch: usize,
    pub temperature: f64,
}

/// File name `curve` looks for in its checkpoint directory.
pub fn checkpoint_name(patches: usize, samples_per_patch: usize) -> String {
    format!("reasoner_P{patches}_T{samples_per_patch}.json")
}

pub fn checkpoint_path(dir: &Path, patches: usize, samples_per_patch: usize) -> PathBuf {
    dir.join(checkpoint_name(patches, samples_per_patch))
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let c = ck.model.config();
    let file = CheckpointFile {
        format: FORMAT.into(),
        config: ConfigRecord {
            num_categories: c.num_categories,
            seq_len: c.seq_len,
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            head_layers: c.head_layers,
            head_mode: c.head_mode.as_str().into(),
            init_seed: c.init_seed,
        },
        patches: ck.patches,
        samples_per_patch: ck.samples_per_patch,
        temperature: ck.temperature,
        tensors: ck
            .model
            .tensors()
            .into_iter()
            .map(|(name, group, shape, data)| TensorRecord {
                name,
                group: group.as_str().into(),
                shape,
                data,
            })
            .collect(),
    };
    let json = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if file.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format {:?}", file.format)));
    }
    let head_mode = HeadMode::parse(&file.config.head_mode)
        .ok_or_else(|| Error::Checkpoint(format!("unknown head mode {:?}", file.config.head_mode)))?;
    let config = ReasonerConfig {
        num_categories: file.config.num_categories,
        seq_len: file.config.seq_len,
        d_model: file.config.d_model,
        n_layers: file.config.n_layers,
        n_heads: file.config.n_heads,
        head_layers: file.config.head_layers,
        head_mode,
        init_seed: file.config.init_seed,
    };
    if config.seq_len != 2 * file.patches * file.samples_per_patch {
        return Err(Error::Checkpoint("seq_len differs from 2 * P * T".into()));
    }
    let model = Reasoner::from_tensors(config, file.tensors.iter().map(|t| (t.name.as_str(), t.data.as_slice())))?;
    // the partition and shapes are recorded for readers; check they agree with the model
    let expected = model.tensors();
    for (t, (name, group, shape, _)) in file.tensors.iter().zip(&expected) {
        if &t.name != name || t.group != group.as_str() || t.shape != *shape {
            return Err(Error::Checkpoint(format!("tensor {:?} has unexpected group or shape", t.name)));
        }
    }
    Ok(Checkpoint {
        model,
        patches: file.patches,
        samples_per_patch: file.samples_per_patch,
        temperature: file.temperature,
    })
}
