//! Temperature-scaled sampling from per-patch posteriors and trace assembly.

use alloc::vec::Vec;

use crate::error::CoreError;
use crate::rng::{SplitMix64, TRACE_TAG};
use crate::types::{
    ConfidenceSource, PosteriorClip, PosteriorKind, ReasoningTrace, TraceConfig,
    NUM_CONFIDENCE_BUCKETS,
};

/// Sharpens (`tau < 1`) or flattens (`tau > 1`) a non-negative vector:
/// `q_i = d_i^(1/tau) / sum_j d_j^(1/tau)`.
///
/// Probabilities are all we get from the backbones, so temperature acts on
/// them directly. For softmax outputs this equals dividing the logits by `tau`.
pub fn temper(dist: &[f64], tau: f64) -> Result<Vec<f64>, CoreError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(CoreError::NonPositiveTemperature(tau));
    }
    if dist.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CoreError::NonFinite);
    }
    let max = dist.iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(CoreError::AllZero);
    }
    let mut out: Vec<f64> = if tau == 1.0 {
        dist.to_vec()
    } else {
        // scale by the max first so tiny temperatures cannot underflow every entry
        let inv = 1.0 / tau;
        dist.iter().map(|&d| libm::pow(d / max, inv)).collect()
    };
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Turns independent sigmoid scores into a sampling distribution by dividing by their sum.
pub fn normalize_multilabel(row: &[f64]) -> Result<Vec<f64>, CoreError> {
    if row.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(CoreError::NonFinite);
    }
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        return Err(CoreError::AllZero);
    }
    Ok(row.iter().map(|&v| v / sum).collect())
}

/// Maps a confidence in `[0, 1]` to one of ten equal-width buckets; `1.0` lands in the top bucket.
pub fn bucket_confidence(c: f64) -> Result<u8, CoreError> {
    if !(0.0..=1.0).contains(&c) {
        return Err(CoreError::ConfidenceOutOfRange(c));
    }
    let b = libm::floor(c * NUM_CONFIDENCE_BUCKETS as f64) as usize;
    Ok(b.min(NUM_CONFIDENCE_BUCKETS - 1) as u8)
}

/// Precomputed inverse-CDF sampler for one patch.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    base: Vec<f64>,
    probs: Vec<f64>,
    cdf: Vec<f64>,
    last_positive: usize,
    source: ConfidenceSource,
}

impl PatchSampler {
    pub fn new(
        row: &[f64],
        kind: PosteriorKind,
        tau: f64,
        source: ConfidenceSource,
    ) -> Result<Self, CoreError> {
        let base = match kind {
            PosteriorKind::Softmax => row.to_vec(),
            PosteriorKind::Sigmoid => normalize_multilabel(row)?,
        };
        let probs = temper(&base, tau)?;
        let mut acc = 0.0;
        let cdf: Vec<f64> = probs
            .iter()
            .map(|&p| {
                acc += p;
                acc
            })
            .collect();
        let last_positive = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        Ok(Self {
            base,
            probs,
            cdf,
            last_positive,
            source,
        })
    }

    /// The distribution draws are made from.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// One `(category, confidence)` draw.
    pub fn draw(&self, rng: &mut SplitMix64) -> (usize, f64) {
        let u = rng.next_f64();
        // first index whose cumulative mass exceeds u; boundary ties go low
        let mut idx = self.cdf.partition_point(|&c| c <= u);
        if idx >= self.cdf.len() {
            idx = self.last_positive;
        }
        let conf = match self.source {
            ConfidenceSource::PreTemperature => self.base[idx],
            ConfidenceSource::PostTemperature => self.probs[idx],
        };
        (idx, conf.clamp(0.0, 1.0))
    }
}

/// Draws `t` independent samples from one patch's tempered posterior.
pub fn sample_patch(
    row: &[f64],
    kind: PosteriorKind,
    tau: f64,
    t: usize,
    source: ConfidenceSource,
    rng: &mut SplitMix64,
) -> Result<Vec<(usize, f64)>, CoreError> {
    let sampler = PatchSampler::new(row, kind, tau, source)?;
    Ok((0..t).map(|_| sampler.draw(rng)).collect())
}

/// Samples every patch `T` times and assembles the `2 * P * T` token trace, patch-major.
pub fn build_trace(
    clip: &PosteriorClip,
    cfg: &TraceConfig,
    rng: &mut SplitMix64,
) -> Result<ReasoningTrace, CoreError> {
    cfg.validate()?;
    if clip.num_patches() != cfg.patches {
        return Err(CoreError::PatchCountMismatch {
            expected: cfg.patches,
            found: clip.num_patches(),
        });
    }
    let mut draws = Vec::with_capacity(cfg.num_draws());
    for row in &clip.posteriors {
        let sampler = PatchSampler::new(row, cfg.kind, cfg.temperature, cfg.confidence)?;
        draws.extend((0..cfg.samples_per_patch).map(|_| sampler.draw(rng)));
    }
    ReasoningTrace::from_draws(clip.clip_id.clone(), *cfg, &draws)
}

/// [`build_trace`] on the clip's own substream of `seed`, keyed by its ordinal.
pub fn build_trace_seeded(
    clip: &PosteriorClip,
    ordinal: usize,
    cfg: &TraceConfig,
    seed: u64,
) -> Result<ReasoningTrace, CoreError> {
    let mut rng = SplitMix64::derive(seed, &[ordinal as u64, TRACE_TAG]);
    build_trace(clip, cfg, &mut rng)
}

/// Traces for all clips in order.
pub fn build_traces(
    clips: &[PosteriorClip],
    cfg: &TraceConfig,
    seed: u64,
) -> Result<Vec<ReasoningTrace>, CoreError> {
    clips
        .iter()
        .enumerate()
        .map(|(i, clip)| build_trace_seeded(clip, i, cfg, seed))
        .collect()
}
