//! `traces.jsonl`: one sampled reasoning trace per line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use patchtrace_core::sampler::bucket_confidence;
use patchtrace_core::{
    PosteriorKind, ReasoningTrace, TraceConfig, TraceToken, NUM_CONFIDENCE_BUCKETS,
};

use crate::error::{Error, Result};
use crate::ingest::DEFAULT_PATCH_MS;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    clip_id: String,
    #[serde(rename = "P")]
    patches: usize,
    #[serde(rename = "T")]
    samples: usize,
    temperature: f64,
    tokens: Vec<usize>,
    confidences: Vec<f64>,
}

/// Traces read back from disk together with the category count they encode.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub num_categories: usize,
    pub traces: Vec<ReasoningTrace>,
}

pub fn format_trace_line(out: &mut String, trace: &ReasoningTrace, num_categories: usize) {
    let cfg = trace.config();
    out.push_str("{\"clip_id\":");
    out.push_str(&serde_json::to_string(trace.clip_id()).expect("string serialization"));
    let _ = write!(
        out,
        ",\"P\":{},\"T\":{},\"temperature\":{},\"tokens\":[",
        cfg.patches, cfg.samples_per_patch, cfg.temperature
    );
    for (i, id) in trace.token_ids(num_categories).iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{id}");
    }
    out.push_str("],\"confidences\":[");
    for (i, c) in trace.raw_confidences().iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        let _ = write!(out, "{c}");
    }
    out.push_str("]}");
}

pub fn write_traces(path: &Path, traces: &[ReasoningTrace], num_categories: usize) -> Result<()> {
    let mut out = String::new();
    for t in traces {
        format_trace_line(&mut out, t, num_categories);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The file does not record C, so it is recovered from the first confidence
/// token: `id - bucket(confidence)`. Every other confidence token must agree.
fn infer_categories(line: &TraceLine) -> std::result::Result<usize, String> {
    let (&id, &conf) = line
        .tokens
        .get(1)
        .zip(line.confidences.first())
        .ok_or("empty trace")?;
    let bucket = bucket_confidence(conf).map_err(|e| e.to_string())? as usize;
    id.checked_sub(bucket)
        .filter(|&c| c >= 2)
        .ok_or_else(|| "confidence token below the confidence range".into())
}

fn decode(line: TraceLine, c: usize, kind: PosteriorKind, patch_ms: u32) -> std::result::Result<ReasoningTrace, String> {
    let cfg = TraceConfig::new(line.patches, line.samples, line.temperature, patch_ms, kind)
        .map_err(|e| e.to_string())?;
    if line.tokens.len() != cfg.seq_len() || line.confidences.len() != cfg.num_draws() {
        return Err(format!(
            "expected {} tokens and {} confidences, found {} and {}",
            cfg.seq_len(),
            cfg.num_draws(),
            line.tokens.len(),
            line.confidences.len()
        ));
    }
    let mut tokens = Vec::with_capacity(line.tokens.len());
    for (pos, &id) in line.tokens.iter().enumerate() {
        let tok = if pos % 2 == 0 {
            if id >= c {
                return Err(format!("token {pos}: category id {id} out of range"));
            }
            TraceToken::Category(id)
        } else {
            let bucket = bucket_confidence(line.confidences[pos / 2]).map_err(|e| e.to_string())?;
            if id < c || id - c >= NUM_CONFIDENCE_BUCKETS || id - c != bucket as usize {
                return Err(format!("token {pos}: confidence id {id} does not match its confidence"));
            }
            TraceToken::Confidence(bucket)
        };
        tokens.push(tok);
    }
    ReasoningTrace::from_parts(line.clip_id, cfg, tokens, line.confidences).map_err(|e| e.to_string())
}

/// Reads a traces file. `kind` and `patch_ms` are not stored per trace and
/// are taken from the caller.
pub fn read_traces(path: &Path, kind: PosteriorKind, patch_ms: u32) -> Result<TraceFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut traces = Vec::new();
    let mut num_categories: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let line: TraceLine = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        let c = infer_categories(&line).map_err(err)?;
        match num_categories {
            Some(prev) if prev != c => {
                return Err(err(format!("trace encodes {c} categories, earlier traces {prev}")))
            }
            _ => num_categories = Some(c),
        }
        traces.push(decode(line, c, kind, patch_ms).map_err(err)?);
    }
    Ok(TraceFile {
        num_categories: num_categories.unwrap_or(0),
        traces,
    })
}

/// [`read_traces`] with softmax posteriors and the default patch length.
pub fn read_traces_default(path: &Path) -> Result<TraceFile> {
    read_traces(path, PosteriorKind::Softmax, DEFAULT_PATCH_MS)
}
