//! Reasoning traces over patch-level classifier posteriors.
//!
//! A frozen audio classifier emits one posterior per patch. This crate samples
//! those posteriors `T` times per patch, interleaves each sampled category with
//! a bucketed confidence token, and aggregates the resulting trace with
//! counting rules or a small transformer whose blocks stay frozen while only
//! the token embedding and classification head are trained.
//!
//! Everything here is `no_std` + `alloc`. File formats, the chat-completion
//! client and the command line live in the `patchtrace` crate.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod aggregate;
pub mod error;
pub mod metrics;
pub mod prompt;
pub mod reasoner;
pub mod rng;
pub mod sampler;
pub mod synth;
pub mod types;

pub use error::CoreError;
pub use types::{
    CategorySpace, ConfidenceSource, PosteriorClip, PosteriorKind, Prediction, PredictionRecord, ReasoningTrace,
    TraceConfig, TraceToken, NUM_CONFIDENCE_BUCKETS,
};

/// Index of the largest entry; ties go to the lowest index. NaN entries never win.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
