use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use super::model::{HeadMode, Reasoner};
use super::nn;
use crate::argmax;
use crate::error::CoreError;
use crate::rng::SplitMix64;
use crate::types::{Prediction, PredictionRecord, ReasoningTrace};

/// Adam with a cosine learning-rate decay from `lr_start` to `lr_end` over all steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub train_seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 16,
            lr_start: 1e-3,
            lr_end: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            train_seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be positive"));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(CoreError::Config("learning rates must satisfy lr_start > lr_end > 0"));
        }
        Ok(())
    }

    /// Learning rate at `step` of `total`.
    pub fn learning_rate(&self, step: usize, total: usize) -> f64 {
        let frac = if total > 1 {
            step as f64 / (total - 1) as f64
        } else {
            0.0
        };
        self.lr_end
            + 0.5 * (self.lr_start - self.lr_end) * (1.0 + libm::cos(core::f64::consts::PI * frac))
    }
}

/// One training sequence and its label set.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub labels: BTreeSet<usize>,
}

impl Example {
    pub fn from_trace(trace: &ReasoningTrace, num_categories: usize, labels: BTreeSet<usize>) -> Self {
        Self {
            ids: trace.token_ids(num_categories),
            labels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    /// Mean example loss for each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

fn target_vector(mode: HeadMode, labels: &BTreeSet<usize>, c: usize) -> Result<Vec<f64>, CoreError> {
    if mode == HeadMode::SoftmaxCe && labels.len() != 1 {
        return Err(CoreError::ShapeMismatch("single-label head needs exactly one label per example"));
    }
    let mut t = vec![0.0; c];
    for &l in labels {
        *t.get_mut(l).ok_or(CoreError::LabelOutOfRange {
            label: l,
            num_categories: c,
        })? = 1.0;
    }
    Ok(t)
}

/// Mini-batch Adam on the embedding and head only. Batch order comes from `train_seed`.
pub fn train(model: &mut Reasoner, examples: &[Example], hyper: &TrainHyper) -> Result<TrainLog, CoreError> {
    hyper.validate()?;
    let cfg = *model.config();
    let targets: Vec<Vec<f64>> = examples
        .iter()
        .map(|ex| {
            if ex.ids.len() != cfg.seq_len {
                return Err(CoreError::ShapeMismatch("example length differs from seq_len"));
            }
            target_vector(cfg.head_mode, &ex.labels, cfg.num_categories)
        })
        .collect::<Result<_, _>>()?;

    let mut log = TrainLog::default();
    if examples.is_empty() {
        return Ok(log);
    }
    let batches_per_epoch = examples.len().div_ceil(hyper.batch_size);
    let total_steps = hyper.epochs * batches_per_epoch;
    let mut m = model.trainable.zeros_like();
    let mut v = model.trainable.zeros_like();
    let mut rng = SplitMix64::new(hyper.train_seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();

    for epoch in 0..hyper.epochs {
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut grads = model.trainable.zeros_like();
            for &i in batch {
                let cache = nn::forward(model, &examples[i].ids, false)?;
                let (loss, dlogits) = nn::loss_and_grad(cfg.head_mode, cache.logits(), &targets[i]);
                if !loss.is_finite() {
                    return Err(CoreError::NonFiniteLoss { epoch });
                }
                epoch_loss += loss;
                nn::backward(model, &cache, &dlogits, &mut grads);
            }
            let scale = 1.0 / batch.len() as f64;
            let lr = hyper.learning_rate(log.steps, total_steps);
            log.steps += 1;
            let bc1 = 1.0 - libm::pow(hyper.beta1, log.steps as f64);
            let bc2 = 1.0 - libm::pow(hyper.beta2, log.steps as f64);
            let params = model.trainable.buffers_mut();
            for (((p, g), m), v) in params.into_iter().zip(&grads).zip(&mut m).zip(&mut v) {
                for j in 0..p.len() {
                    let gj = g[j] * scale;
                    m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * gj;
                    v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * gj * gj;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    p[j] -= lr * mhat / (libm::sqrt(vhat) + hyper.eps);
                }
            }
        }
        log.epoch_loss.push(epoch_loss / examples.len() as f64);
    }
    Ok(log)
}

/// Single-label heads yield the argmax category; multi-label heads yield the sigmoid scores.
pub fn predict(model: &Reasoner, trace: &ReasoningTrace) -> Result<PredictionRecord, CoreError> {
    let ids = trace.token_ids(model.config().num_categories);
    let out = model.forward(&ids)?;
    let predicted = match model.config().head_mode {
        HeadMode::SoftmaxCe => Prediction::Category(argmax(&out)),
        HeadMode::SigmoidBce => Prediction::Scores(out),
    };
    Ok(PredictionRecord::new(trace.clip_id(), "nn_reasoner", predicted))
}
