//! Counting aggregators over reasoning traces and the mean-posterior baseline.
//!
//! Ties always resolve to the lowest category index.

use alloc::vec;
use alloc::vec::Vec;

use crate::argmax;
use crate::error::CoreError;
use crate::types::{PosteriorClip, Prediction, ReasoningTrace};

/// Aggregation methods understood by the experiment runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Majority,
    Weighted,
    MeanPosterior,
    NnReasoner,
    LlmReasoner,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Majority,
        Method::Weighted,
        Method::MeanPosterior,
        Method::NnReasoner,
        Method::LlmReasoner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Majority => "majority",
            Method::Weighted => "weighted",
            Method::MeanPosterior => "mean_posterior",
            Method::NnReasoner => "nn_reasoner",
            Method::LlmReasoner => "llm_reasoner",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    /// Whether the method depends on sampled traces (and so on `T` and temperature).
    pub fn uses_traces(self) -> bool {
        self != Method::MeanPosterior
    }
}

fn checked_counts(trace: &ReasoningTrace, num_categories: usize) -> Result<Vec<usize>, CoreError> {
    if trace.is_empty() {
        return Err(CoreError::EmptyTrace);
    }
    let mut counts = vec![0usize; num_categories];
    for c in trace.categories() {
        *counts.get_mut(c).ok_or(CoreError::IdOutOfRange {
            id: c,
            vocab: num_categories,
        })? += 1;
    }
    Ok(counts)
}

/// Most frequently drawn category.
pub fn majority_vote(trace: &ReasoningTrace, num_categories: usize) -> Result<usize, CoreError> {
    let counts = checked_counts(trace, num_categories)?;
    let mut best = 0;
    for (i, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Per-category sums of raw confidences.
pub fn confidence_sums(trace: &ReasoningTrace, num_categories: usize) -> Result<Vec<f64>, CoreError> {
    checked_counts(trace, num_categories)?;
    let mut sums = vec![0.0; num_categories];
    for (c, conf) in trace.draws() {
        sums[c] += conf;
    }
    Ok(sums)
}

/// Category with the largest summed raw confidence.
pub fn confidence_weighted_vote(
    trace: &ReasoningTrace,
    num_categories: usize,
) -> Result<usize, CoreError> {
    Ok(argmax(&confidence_sums(trace, num_categories)?))
}

/// Draw frequencies: `count_i / (P * T)`.
pub fn count_scores(trace: &ReasoningTrace, num_categories: usize) -> Result<Vec<f64>, CoreError> {
    let counts = checked_counts(trace, num_categories)?;
    let total = trace.config().num_draws() as f64;
    Ok(counts.into_iter().map(|n| n as f64 / total).collect())
}

/// Confidence sums normalized to sum to one; the score-vector form of the weighted vote.
pub fn weighted_scores(trace: &ReasoningTrace, num_categories: usize) -> Result<Vec<f64>, CoreError> {
    let mut sums = confidence_sums(trace, num_categories)?;
    let total: f64 = sums.iter().sum();
    if total > 0.0 {
        for s in &mut sums {
            *s /= total;
        }
    }
    Ok(sums)
}

/// Column means of the clip's posterior matrix.
pub fn mean_posterior_scores(clip: &PosteriorClip) -> Result<Vec<f64>, CoreError> {
    let first = clip.posteriors.first().ok_or(CoreError::EmptyClip)?;
    let mut mean = vec![0.0; first.len()];
    for row in &clip.posteriors {
        if row.len() != mean.len() {
            return Err(CoreError::ShapeMismatch("ragged posterior matrix"));
        }
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let p = clip.posteriors.len() as f64;
    for m in &mut mean {
        *m /= p;
    }
    Ok(mean)
}

/// The conventional single-vector pipeline: argmax of the patch-averaged posterior.
pub fn mean_posterior_baseline(clip: &PosteriorClip) -> Result<usize, CoreError> {
    Ok(argmax(&mean_posterior_scores(clip)?))
}

/// Applies a counting method to a trace. Multi-label data gets score vectors, otherwise a category.
pub fn aggregate_trace(
    trace: &ReasoningTrace,
    method: Method,
    num_categories: usize,
    multi_label: bool,
) -> Result<Prediction, CoreError> {
    match (method, multi_label) {
        (Method::Majority, false) => majority_vote(trace, num_categories).map(Prediction::Category),
        (Method::Majority, true) => count_scores(trace, num_categories).map(Prediction::Scores),
        (Method::Weighted, false) => {
            confidence_weighted_vote(trace, num_categories).map(Prediction::Category)
        }
        (Method::Weighted, true) => weighted_scores(trace, num_categories).map(Prediction::Scores),
        _ => Err(CoreError::Config("method is not a trace-counting aggregator")),
    }
}
