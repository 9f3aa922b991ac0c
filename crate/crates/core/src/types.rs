//! Domain types shared by every stage of the pipeline.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::CoreError;

/// Number of confidence tokens appended after the category tokens.
pub const NUM_CONFIDENCE_BUCKETS: usize = 10;

const SOFTMAX_ROW_TOL: f64 = 1e-6;

/// Ordered category names. A name's index is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySpace {
    names: Vec<String>,
    folded: BTreeMap<String, usize>,
}

impl CategorySpace {
    pub fn new<I, S>(names: I) -> Result<Self, CoreError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(CoreError::TooFewCategories(names.len()));
        }
        let mut folded = BTreeMap::new();
        for (i, name) in names.iter().enumerate() {
            if name.trim().is_empty() {
                return Err(CoreError::EmptyCategoryName(i));
            }
            if folded.insert(name.to_lowercase(), i).is_some() {
                return Err(CoreError::DuplicateCategory(name.clone()));
            }
        }
        Ok(Self { names, folded })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Case-insensitive lookup.
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.folded.get(&name.to_lowercase()).copied()
    }

    /// Token vocabulary size: one token per category plus the confidence buckets.
    pub fn vocab_size(&self) -> usize {
        self.names.len() + NUM_CONFIDENCE_BUCKETS
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PosteriorKind {
    /// Rows are distributions summing to one.
    Softmax,
    /// Independent per-category scores in `[0, 1]`.
    Sigmoid,
}

impl PosteriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Softmax => "softmax",
            Self::Sigmoid => "sigmoid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax" => Some(Self::Softmax),
            "sigmoid" => Some(Self::Sigmoid),
            _ => None,
        }
    }
}

/// One clip's per-patch posteriors and its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorClip {
    pub clip_id: String,
    pub labels: BTreeSet<usize>,
    /// `P` rows of `C` entries.
    pub posteriors: Vec<Vec<f64>>,
}

impl PosteriorClip {
    pub fn num_patches(&self) -> usize {
        self.posteriors.len()
    }

    /// The label when the clip carries exactly one.
    pub fn single_label(&self) -> Option<usize> {
        if self.labels.len() == 1 {
            self.labels.first().copied()
        } else {
            None
        }
    }
}

/// Checks every [`PosteriorClip`] invariant for `kind` over `num_categories` columns.
pub fn validate_clip(
    clip: &PosteriorClip,
    kind: PosteriorKind,
    num_categories: usize,
) -> Result<(), CoreError> {
    if clip.posteriors.is_empty() {
        return Err(CoreError::EmptyClip);
    }
    if let Some(&label) = clip.labels.iter().find(|&&l| l >= num_categories) {
        return Err(CoreError::LabelOutOfRange {
            label,
            num_categories,
        });
    }
    for (row_idx, row) in clip.posteriors.iter().enumerate() {
        if row.len() != num_categories {
            return Err(CoreError::ShapeViolation {
                row: row_idx,
                expected: num_categories,
                found: row.len(),
            });
        }
        for (col, &value) in row.iter().enumerate() {
            let out_of_range = match kind {
                PosteriorKind::Softmax => !(value.is_finite() && value >= 0.0),
                PosteriorKind::Sigmoid => !(0.0..=1.0).contains(&value),
            };
            if out_of_range {
                return Err(CoreError::RangeViolation {
                    row: row_idx,
                    col,
                    value,
                });
            }
        }
        if kind == PosteriorKind::Softmax {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > SOFTMAX_ROW_TOL {
                return Err(CoreError::RowSumViolation { row: row_idx, sum });
            }
        }
    }
    Ok(())
}

/// Which probability a confidence token reports for a drawn category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConfidenceSource {
    /// The backbone's own probability, before temperature.
    #[default]
    PreTemperature,
    /// The probability the draw was actually made with.
    PostTemperature,
}

/// Parameters for turning a clip into a reasoning trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceConfig {
    pub patches: usize,
    pub samples_per_patch: usize,
    pub temperature: f64,
    pub patch_ms: u32,
    pub kind: PosteriorKind,
    pub confidence: ConfidenceSource,
}

impl TraceConfig {
    pub fn new(
        patches: usize,
        samples_per_patch: usize,
        temperature: f64,
        patch_ms: u32,
        kind: PosteriorKind,
    ) -> Result<Self, CoreError> {
        let cfg = Self {
            patches,
            samples_per_patch,
            temperature,
            patch_ms,
            kind,
            confidence: ConfidenceSource::PreTemperature,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_confidence(mut self, source: ConfidenceSource) -> Self {
        self.confidence = source;
        self
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.patches == 0 {
            return Err(CoreError::Config("patch count must be at least 1"));
        }
        if self.samples_per_patch == 0 {
            return Err(CoreError::Config("samples per patch must be at least 1"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(CoreError::NonPositiveTemperature(self.temperature));
        }
        if self.patch_ms == 0 {
            return Err(CoreError::Config("patch duration must be positive"));
        }
        Ok(())
    }

    /// Number of category draws, `P * T`.
    pub fn num_draws(&self) -> usize {
        self.patches * self.samples_per_patch
    }

    /// Token count, `2 * P * T`.
    pub fn seq_len(&self) -> usize {
        2 * self.num_draws()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceToken {
    Category(usize),
    Confidence(u8),
}

impl TraceToken {
    /// Vocabulary id: categories map to themselves, bucket `b` maps to `C + b`.
    pub fn id(self, num_categories: usize) -> usize {
        match self {
            Self::Category(i) => i,
            Self::Confidence(b) => num_categories + b as usize,
        }
    }

    pub fn from_id(id: usize, num_categories: usize) -> Result<Self, CoreError> {
        let vocab = num_categories + NUM_CONFIDENCE_BUCKETS;
        if id < num_categories {
            Ok(Self::Category(id))
        } else if id < vocab {
            Ok(Self::Confidence((id - num_categories) as u8))
        } else {
            Err(CoreError::IdOutOfRange { id, vocab })
        }
    }
}

/// Sampled categories interleaved with confidence tokens, patch-major.
///
/// Holds exactly `2 * P * T` tokens alternating category / confidence, and one
/// raw confidence per category draw.
#[derive(Debug, Clone, PartialEq)]
pub struct ReasoningTrace {
    clip_id: String,
    config: TraceConfig,
    tokens: Vec<TraceToken>,
    raw_confidences: Vec<f64>,
}

impl ReasoningTrace {
    /// Assembles a trace from `P * T` draws given in patch-major order.
    pub fn from_draws(
        clip_id: impl Into<String>,
        config: TraceConfig,
        draws: &[(usize, f64)],
    ) -> Result<Self, CoreError> {
        if draws.len() != config.num_draws() {
            return Err(CoreError::MalformedTrace("draw count differs from P * T"));
        }
        let mut tokens = Vec::with_capacity(2 * draws.len());
        let mut raw_confidences = Vec::with_capacity(draws.len());
        for &(category, conf) in draws {
            tokens.push(TraceToken::Category(category));
            tokens.push(TraceToken::Confidence(crate::sampler::bucket_confidence(conf)?));
            raw_confidences.push(conf);
        }
        Ok(Self {
            clip_id: clip_id.into(),
            config,
            tokens,
            raw_confidences,
        })
    }

    /// Rebuilds a trace from stored tokens, checking every structural invariant.
    pub fn from_parts(
        clip_id: impl Into<String>,
        config: TraceConfig,
        tokens: Vec<TraceToken>,
        raw_confidences: Vec<f64>,
    ) -> Result<Self, CoreError> {
        config.validate()?;
        if tokens.len() != config.seq_len() {
            return Err(CoreError::MalformedTrace("token count differs from 2 * P * T"));
        }
        if raw_confidences.len() != config.num_draws() {
            return Err(CoreError::MalformedTrace("confidence count differs from P * T"));
        }
        for (pos, token) in tokens.iter().enumerate() {
            let ok = match token {
                TraceToken::Category(_) => pos % 2 == 0,
                TraceToken::Confidence(b) => pos % 2 == 1 && (*b as usize) < NUM_CONFIDENCE_BUCKETS,
            };
            if !ok {
                return Err(CoreError::MalformedTrace("tokens do not alternate category/confidence"));
            }
        }
        if raw_confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(CoreError::MalformedTrace("raw confidence outside [0, 1]"));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            config,
            tokens,
            raw_confidences,
        })
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    pub fn config(&self) -> &TraceConfig {
        &self.config
    }

    pub fn tokens(&self) -> &[TraceToken] {
        &self.tokens
    }

    pub fn raw_confidences(&self) -> &[f64] {
        &self.raw_confidences
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Sampled category of every draw, in trace order.
    pub fn categories(&self) -> impl Iterator<Item = usize> + '_ {
        self.tokens.iter().filter_map(|t| match t {
            TraceToken::Category(c) => Some(*c),
            TraceToken::Confidence(_) => None,
        })
    }

    /// `(category, raw confidence)` for every draw, in trace order.
    pub fn draws(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.categories().zip(self.raw_confidences.iter().copied())
    }

    /// Draws grouped by patch: `P` groups of `T`.
    pub fn patch_draws(&self) -> Vec<Vec<(usize, f64)>> {
        let t = self.config.samples_per_patch;
        let all: Vec<(usize, f64)> = self.draws().collect();
        all.chunks(t).map(<[_]>::to_vec).collect()
    }

    pub fn token_ids(&self, num_categories: usize) -> Vec<usize> {
        self.tokens.iter().map(|t| t.id(num_categories)).collect()
    }

    /// Inverse of [`token_ids`](Self::token_ids).
    pub fn decode_ids(ids: &[usize], num_categories: usize) -> Result<Vec<TraceToken>, CoreError> {
        ids.iter()
            .map(|&id| TraceToken::from_id(id, num_categories))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Category(usize),
    Scores(Vec<f64>),
    /// No usable output, e.g. an unparseable LLM response. Scored as wrong.
    Unscored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub clip_id: String,
    pub method: String,
    pub predicted: Prediction,
}

impl PredictionRecord {
    pub fn new(clip_id: impl Into<String>, method: impl Into<String>, predicted: Prediction) -> Self {
        Self {
            clip_id: clip_id.into(),
            method: method.into(),
            predicted,
        }
    }

    /// Checks range and finiteness against `num_categories`.
    pub fn validate(&self, num_categories: usize) -> Result<(), CoreError> {
        match &self.predicted {
            Prediction::Category(c) if *c >= num_categories => Err(CoreError::LabelOutOfRange {
                label: *c,
                num_categories,
            }),
            Prediction::Scores(s) if s.len() != num_categories => {
                Err(CoreError::ShapeMismatch("score vector length differs from C"))
            }
            Prediction::Scores(s) if s.iter().any(|v| !v.is_finite()) => Err(CoreError::NonFinite),
            _ => Ok(()),
        }
    }
}
