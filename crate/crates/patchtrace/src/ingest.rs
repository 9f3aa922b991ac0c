//! The posterior interchange format: `dataset.json`, `categories.txt`, `clips.jsonl`.
//!
//! Posteriors are written in plain decimal notation using the shortest
//! representation that parses back to the same `f64`, so a write/load round
//! trip is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use patchtrace_core::types::validate_clip;
use patchtrace_core::{CategorySpace, PosteriorClip, PosteriorKind, TraceConfig};

pub use patchtrace_core::synth::{synth_generate, SynthConfig, SynthDataset};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "dataset.json";
pub const CATEGORIES_FILE: &str = "categories.txt";
pub const CLIPS_FILE: &str = "clips.jsonl";

/// Patch duration assumed when nothing else is known.
pub const DEFAULT_PATCH_MS: u32 = 500;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_patches: usize,
    pub num_categories: usize,
    pub kind: String,
    pub categories_file: String,
    pub clips_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub kind: PosteriorKind,
    pub num_patches: usize,
    pub categories: CategorySpace,
    pub clips: Vec<PosteriorClip>,
}

impl Dataset {
    pub fn from_synth(name: impl Into<String>, cfg: &SynthConfig, synth: SynthDataset) -> Self {
        Self {
            name: name.into(),
            kind: cfg.kind,
            num_patches: cfg.num_patches,
            categories: synth.categories,
            clips: synth.clips,
        }
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    /// Single-label softmax data is scored by top-1 accuracy; everything else by macro AUC.
    pub fn is_single_label(&self) -> bool {
        self.kind == PosteriorKind::Softmax && self.clips.iter().all(|c| c.labels.len() == 1)
    }

    /// Trace settings implied by the dataset: `T = 1`, temperature 1, 500 ms patches.
    pub fn default_trace_config(&self) -> Result<TraceConfig> {
        Ok(TraceConfig::new(
            self.num_patches,
            1,
            1.0,
            DEFAULT_PATCH_MS,
            self.kind,
        )?)
    }

    pub fn clip(&self, clip_id: &str) -> Option<(usize, &PosteriorClip)> {
        self.clips.iter().enumerate().find(|(_, c)| c.clip_id == clip_id)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipLine {
    clip_id: String,
    labels: Vec<usize>,
    posteriors: Vec<Vec<f64>>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Accepts either the manifest file or the directory holding `dataset.json`.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn parse_categories(path: &Path, text: &str) -> Result<CategorySpace> {
    let body = text.strip_suffix('\n').unwrap_or(text);
    let mut names = Vec::new();
    if !body.is_empty() {
        for (i, line) in body.split('\n').enumerate() {
            let err = |message: &str| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: message.into(),
            };
            if line.contains('\r') {
                return Err(err("carriage return in category name (LF line endings required)"));
            }
            if line.trim().is_empty() {
                return Err(err("blank category line"));
            }
            names.push(line.to_string());
        }
    }
    CategorySpace::new(names).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

/// Loads and validates a dataset. Clip order follows the file.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest_path = resolve_manifest(manifest_path);
    let manifest: DatasetManifest =
        serde_json::from_str(&read(&manifest_path)?).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
    let kind = PosteriorKind::parse(&manifest.kind).ok_or_else(|| Error::Parse {
        path: manifest_path.clone(),
        line: 0,
        message: format!("unknown kind {:?}", manifest.kind),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let cat_path = base.join(&manifest.categories_file);
    let categories = parse_categories(&cat_path, &read(&cat_path)?)?;
    if categories.len() != manifest.num_categories {
        return Err(Error::InconsistentShape(format!(
            "manifest says {} categories, {} lists {}",
            manifest.num_categories,
            cat_path.display(),
            categories.len()
        )));
    }

    let clips_path = base.join(&manifest.clips_file);
    let text = read(&clips_path)?;
    let mut clips = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ClipLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: clips_path.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let clip = PosteriorClip {
            clip_id: parsed.clip_id,
            labels: parsed.labels.into_iter().collect(),
            posteriors: parsed.posteriors,
        };
        if clip.posteriors.len() != manifest.num_patches {
            return Err(Error::InconsistentShape(format!(
                "clip {:?} has {} patches, manifest says {}",
                clip.clip_id,
                clip.posteriors.len(),
                manifest.num_patches
            )));
        }
        if let Some(row) = clip.posteriors.iter().find(|r| r.len() != categories.len()) {
            return Err(Error::InconsistentShape(format!(
                "clip {:?} has a row of {} entries, expected {}",
                clip.clip_id,
                row.len(),
                categories.len()
            )));
        }
        validate_clip(&clip, kind, categories.len()).map_err(|source| Error::Validation {
            clip_id: clip.clip_id.clone(),
            source,
        })?;
        clips.push(clip);
    }

    Ok(Dataset {
        name: manifest.name,
        kind,
        num_patches: manifest.num_patches,
        categories,
        clips,
    })
}

/// Appends one `clips.jsonl` object (without newline).
pub fn format_clip_line(out: &mut String, clip: &PosteriorClip) {
    out.push_str("{\"clip_id\":");
    out.push_str(&serde_json::to_string(&clip.clip_id).expect("string serialization"));
    out.push_str(",\"labels\":[");
    for (i, l) in clip.labels.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{l}");
    }
    out.push_str("],\"posteriors\":[");
    for (r, row) in clip.posteriors.iter().enumerate() {
        if r > 0 {
            out.push(',');
        }
        out.push('[');
        for (i, v) in row.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            // Display for f64 never uses exponent notation and round-trips exactly
            let _ = write!(out, "{v}");
        }
        out.push(']');
    }
    out.push_str("]}");
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

/// Writes the three dataset files into `out_dir` and returns the manifest path.
pub fn write_dataset(dataset: &Dataset, out_dir: &Path) -> Result<PathBuf> {
    for clip in &dataset.clips {
        validate_clip(clip, dataset.kind, dataset.num_categories()).map_err(|source| {
            Error::Validation {
                clip_id: clip.clip_id.clone(),
                source,
            }
        })?;
        if clip.num_patches() != dataset.num_patches {
            return Err(Error::InconsistentShape(format!(
                "clip {:?} has {} patches, dataset says {}",
                clip.clip_id,
                clip.num_patches(),
                dataset.num_patches
            )));
        }
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut cats = String::new();
    for name in dataset.categories.names() {
        cats.push_str(name);
        cats.push('\n');
    }
    write_file(&out_dir.join(CATEGORIES_FILE), cats.as_bytes())?;

    let mut clips = String::new();
    for clip in &dataset.clips {
        format_clip_line(&mut clips, clip);
        clips.push('\n');
    }
    write_file(&out_dir.join(CLIPS_FILE), clips.as_bytes())?;

    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        num_patches: dataset.num_patches,
        num_categories: dataset.num_categories(),
        kind: dataset.kind.as_str().to_string(),
        categories_file: CATEGORIES_FILE.to_string(),
        clips_file: CLIPS_FILE.to_string(),
    };
    let mut json = serde_json::to_string_pretty(&manifest).expect("manifest serialization");
    json.push('\n');
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_file(&manifest_path, json.as_bytes())?;
    Ok(manifest_path)
}
