//! Synthetic posterior datasets whose per-patch reliability grows with context.
//!
//! For patch `p` of `P`, the true label(s) get a logit boost
//! `a_p = a0 + (a1 - a0) * p / (P - 1)` over Gaussian noise of scale `g`.
//! Early patches are therefore close to chance and late patches confident.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::rng::{SplitMix64, SYNTH_TAG};
use crate::types::{CategorySpace, PosteriorClip, PosteriorKind};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_categories: usize,
    pub num_patches: usize,
    pub num_clips: usize,
    /// Label logit boost at the first patch.
    pub a0: f64,
    /// Label logit boost at the last patch.
    pub a1: f64,
    /// Noise scale.
    pub noise: f64,
    pub kind: PosteriorKind,
    pub labels_per_clip: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_categories: 50,
            num_patches: 10,
            num_clips: 1000,
            a0: 0.5,
            a1: 3.0,
            noise: 1.0,
            kind: PosteriorKind::Softmax,
            labels_per_clip: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.num_categories < 2 {
            return Err(CoreError::Config("need at least 2 categories"));
        }
        if self.num_patches == 0 {
            return Err(CoreError::Config("need at least 1 patch"));
        }
        if !(self.a0.is_finite() && self.a1.is_finite() && self.a0 >= 0.0 && self.a1 >= self.a0) {
            return Err(CoreError::Config("signal strengths must satisfy a1 >= a0 >= 0"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(CoreError::Config("noise scale must be non-negative"));
        }
        if self.labels_per_clip == 0 || self.labels_per_clip >= self.num_categories {
            return Err(CoreError::Config("labels per clip must be in 1..C"));
        }
        if self.labels_per_clip > 1 && self.kind == PosteriorKind::Softmax {
            return Err(CoreError::Config("multiple labels per clip need sigmoid posteriors"));
        }
        Ok(())
    }

    /// Signal strength at patch `p`.
    pub fn strength(&self, p: usize) -> f64 {
        if self.num_patches == 1 {
            self.a0
        } else {
            self.a0 + (self.a1 - self.a0) * p as f64 / (self.num_patches - 1) as f64
        }
    }
}

/// A generated dataset: category names plus clips.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub categories: CategorySpace,
    pub clips: Vec<PosteriorClip>,
}

pub fn category_names(n: usize) -> Vec<String> {
    let width = format!("{}", n.saturating_sub(1)).len();
    (0..n).map(|i| format!("class_{i:0width$}")).collect()
}

/// Generates clip `ordinal` from its own substream of `seed`.
pub fn synth_clip(cfg: &SynthConfig, seed: u64, ordinal: usize) -> PosteriorClip {
    let mut rng = SplitMix64::derive(seed, &[ordinal as u64, SYNTH_TAG]);
    let c = cfg.num_categories;
    let mut labels = BTreeSet::new();
    while labels.len() < cfg.labels_per_clip {
        labels.insert(rng.below(c));
    }
    let mut posteriors = Vec::with_capacity(cfg.num_patches);
    let mut z = vec![0.0; c];
    for p in 0..cfg.num_patches {
        let a = cfg.strength(p);
        for (i, zi) in z.iter_mut().enumerate() {
            let boost = if labels.contains(&i) { a } else { 0.0 };
            *zi = boost + cfg.noise * rng.next_normal();
        }
        posteriors.push(match cfg.kind {
            PosteriorKind::Softmax => softmax(&z),
            PosteriorKind::Sigmoid => z.iter().map(|&v| logistic(v)).collect(),
        });
    }
    PosteriorClip {
        clip_id: format!("synth-{ordinal:06}"),
        labels,
        posteriors,
    }
}

pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset, CoreError> {
    cfg.validate()?;
    let categories = CategorySpace::new(category_names(cfg.num_categories))?;
    let clips = (0..cfg.num_clips).map(|i| synth_clip(cfg, seed, i)).collect();
    Ok(SynthDataset { categories, clips })
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| libm::exp(v - max)).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
