use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::rng::SplitMix64;
use crate::types::NUM_CONFIDENCE_BUCKETS;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Single-label: softmax over categories, cross-entropy loss.
    SoftmaxCe,
    /// Multi-label: independent sigmoids, mean binary cross-entropy.
    SigmoidBce,
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SoftmaxCe => "softmax_ce",
            Self::SigmoidBce => "sigmoid_bce",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softmax_ce" => Some(Self::SoftmaxCe),
            "sigmoid_bce" => Some(Self::SigmoidBce),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReasonerConfig {
    pub num_categories: usize,
    /// Fixed input length, `2 * P * T`.
    pub seq_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Affine layers in the classification head; hidden layers are `d_model` wide with GELU.
    pub head_layers: usize,
    pub head_mode: HeadMode,
    pub init_seed: u64,
}

impl ReasonerConfig {
    /// Defaults: `d_model = 64`, 2 layers, 4 heads, single affine head.
    pub fn new(num_categories: usize, seq_len: usize, head_mode: HeadMode) -> Self {
        Self {
            num_categories,
            seq_len,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            head_layers: 1,
            head_mode,
            init_seed: 0,
        }
    }

    /// Category tokens followed by the confidence tokens.
    pub fn vocab_size(&self) -> usize {
        self.num_categories + NUM_CONFIDENCE_BUCKETS
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if self.num_categories < 2 {
            return Err(CoreError::Config("reasoner needs at least 2 categories"));
        }
        if self.seq_len == 0 {
            return Err(CoreError::Config("sequence length must be positive"));
        }
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(CoreError::Config("d_model must be a positive multiple of n_heads"));
        }
        if self.head_layers == 0 {
            return Err(CoreError::Config("head needs at least one layer"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Frozen,
    Trainable,
}

impl ParamGroup {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Frozen => "frozen",
            Self::Trainable => "trainable",
        }
    }
}

/// Dense affine map; `weight` is `n_out x n_in`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Linear {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            weight: vec![0.0; n_in * n_out],
            bias: vec![0.0; n_out],
            n_in,
            n_out,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Block {
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub attn_out: Linear,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

/// Everything that never trains.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenBackbone {
    pub(crate) positional: Vec<f64>,
    pub(crate) blocks: Vec<Block>,
    pub(crate) ln_final: LayerNorm,
}

/// Token embedding and classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainable {
    pub(crate) embedding: Vec<f64>,
    pub(crate) head: Vec<Linear>,
}

impl Trainable {
    /// Parameter buffers in a fixed order: embedding, then weight/bias per head layer.
    pub(crate) fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.head {
            out.push(&mut layer.weight);
            out.push(&mut layer.bias);
        }
        out
    }

    pub(crate) fn zeros_like(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.embedding.len()]];
        for layer in &self.head {
            out.push(vec![0.0; layer.weight.len()]);
            out.push(vec![0.0; layer.bias.len()]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reasoner {
    pub(crate) config: ReasonerConfig,
    pub(crate) frozen: FrozenBackbone,
    pub(crate) trainable: Trainable,
}

struct Slot<'a> {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
    data: &'a mut Vec<f64>,
}

impl Reasoner {
    /// Builds the model from `init_seed`: weights and embeddings ~ N(0, 0.02^2),
    /// layer-norm gains 1, biases 0, sinusoidal positions.
    pub fn new(config: ReasonerConfig) -> Result<Self, CoreError> {
        let mut model = Self::zeros(config)?;
        let mut rng = SplitMix64::new(config.init_seed);
        for slot in model.slots_mut() {
            let name = slot.name.as_str();
            if name == "positional" {
                fill_sinusoidal(slot.data, slot.shape[1]);
            } else if name.ends_with(".gain") {
                slot.data.iter_mut().for_each(|v| *v = 1.0);
            } else if name.ends_with(".bias") {
                slot.data.iter_mut().for_each(|v| *v = 0.0);
            } else {
                slot.data
                    .iter_mut()
                    .for_each(|v| *v = INIT_STD * rng.next_normal());
            }
        }
        Ok(model)
    }

    fn zeros(config: ReasonerConfig) -> Result<Self, CoreError> {
        config.validate()?;
        let d = config.d_model;
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                qkv: Linear::zeros(d, 3 * d),
                attn_out: Linear::zeros(d, d),
                ln2: LayerNorm::new(d),
                mlp_in: Linear::zeros(d, config.mlp_dim()),
                mlp_out: Linear::zeros(config.mlp_dim(), d),
            })
            .collect();
        let head = (0..config.head_layers)
            .map(|l| {
                let n_out = if l + 1 == config.head_layers {
                    config.num_categories
                } else {
                    d
                };
                Linear::zeros(d, n_out)
            })
            .collect();
        Ok(Self {
            config,
            frozen: FrozenBackbone {
                positional: vec![0.0; config.seq_len * d],
                blocks,
                ln_final: LayerNorm::new(d),
            },
            trainable: Trainable {
                embedding: vec![0.0; config.vocab_size() * d],
                head,
            },
        })
    }

    pub fn config(&self) -> &ReasonerConfig {
        &self.config
    }

    fn slots_mut(&mut self) -> Vec<Slot<'_>> {
        let d = self.config.d_model;
        let mut slots = Vec::new();
        let mut push = |name: String, group, shape, data| {
            slots.push(Slot {
                name,
                group,
                shape,
                data,
            })
        };
        let Trainable { embedding, head } = &mut self.trainable;
        let FrozenBackbone {
            positional,
            blocks,
            ln_final,
        } = &mut self.frozen;
        let v = self.config.vocab_size();
        let n = self.config.seq_len;
        use ParamGroup::{Frozen, Trainable as T};
        push("embedding".into(), T, [v, d], embedding);
        push("positional".into(), Frozen, [n, d], positional);
        for (i, b) in blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            let Block {
                ln1,
                qkv,
                attn_out,
                ln2,
                mlp_in,
                mlp_out,
            } = b;
            push(p("ln1.gain"), Frozen, [1, d], &mut ln1.gain);
            push(p("ln1.bias"), Frozen, [1, d], &mut ln1.bias);
            for (tag, lin) in [("qkv", qkv), ("attn_out", attn_out)] {
                push(p(&format!("{tag}.weight")), Frozen, [lin.n_out, lin.n_in], &mut lin.weight);
                push(p(&format!("{tag}.bias")), Frozen, [1, lin.n_out], &mut lin.bias);
            }
            push(p("ln2.gain"), Frozen, [1, d], &mut ln2.gain);
            push(p("ln2.bias"), Frozen, [1, d], &mut ln2.bias);
            for (tag, lin) in [("mlp_in", mlp_in), ("mlp_out", mlp_out)] {
                push(p(&format!("{tag}.weight")), Frozen, [lin.n_out, lin.n_in], &mut lin.weight);
                push(p(&format!("{tag}.bias")), Frozen, [1, lin.n_out], &mut lin.bias);
            }
        }
        push("ln_final.gain".into(), Frozen, [1, d], &mut ln_final.gain);
        push("ln_final.bias".into(), Frozen, [1, d], &mut ln_final.bias);
        for (i, lin) in head.iter_mut().enumerate() {
            let shape = [lin.n_out, lin.n_in];
            let bshape = [1, lin.n_out];
            push(format!("head.{i}.weight"), T, shape, &mut lin.weight);
            push(format!("head.{i}.bias"), T, bshape, &mut lin.bias);
        }
        slots
    }

    /// Every parameter tensor with its name, partition and shape, in a stable order.
    pub fn tensors(&self) -> Vec<(String, ParamGroup, [usize; 2], Vec<f64>)> {
        // slots_mut needs &mut; clone is fine for checkpointing and comparisons
        let mut copy = self.clone();
        copy.slots_mut()
            .into_iter()
            .map(|s| (s.name, s.group, s.shape, s.data.clone()))
            .collect()
    }

    /// Rebuilds a model from `(name, data)` pairs produced by [`tensors`](Self::tensors).
    pub fn from_tensors<'a, I>(config: ReasonerConfig, tensors: I) -> Result<Self, CoreError>
    where
        I: IntoIterator<Item = (&'a str, &'a [f64])>,
    {
        let mut model = Self::zeros(config)?;
        let mut given: alloc::collections::BTreeMap<&str, &[f64]> = tensors.into_iter().collect();
        for slot in model.slots_mut() {
            let data = given
                .remove(slot.name.as_str())
                .ok_or_else(|| CoreError::BadTensor(slot.name.clone()))?;
            if data.len() != slot.data.len() {
                return Err(CoreError::BadTensor(slot.name.clone()));
            }
            slot.data.copy_from_slice(data);
        }
        if let Some((name, _)) = given.into_iter().next() {
            return Err(CoreError::BadTensor(name.into()));
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.3.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable.embedding.len()
            + self
                .trainable
                .head
                .iter()
                .map(|l| l.weight.len() + l.bias.len())
                .sum::<usize>()
    }

    /// Snapshot of every frozen parameter, flattened in [`tensors`](Self::tensors) order.
    pub fn frozen_snapshot(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .filter(|t| t.1 == ParamGroup::Frozen)
            .flat_map(|t| t.3)
            .collect()
    }

    pub fn embedding(&self) -> &[f64] {
        &self.trainable.embedding
    }

    pub fn embedding_mut(&mut self) -> &mut [f64] {
        &mut self.trainable.embedding
    }

    /// Trainable buffers in gradient order: embedding, then weight and bias of each head layer.
    pub fn trainable_buffers_mut(&mut self) -> Vec<&mut [f64]> {
        self.trainable
            .buffers_mut()
            .into_iter()
            .map(Vec::as_mut_slice)
            .collect()
    }

    pub fn trainable(&self) -> &Trainable {
        &self.trainable
    }

    pub fn frozen(&self) -> &FrozenBackbone {
        &self.frozen
    }
}

fn fill_sinusoidal(table: &mut [f64], d: usize) {
    for (pos, row) in table.chunks_mut(d).enumerate() {
        for i in (0..d).step_by(2) {
            let freq = libm::pow(10_000.0, -(i as f64) / d as f64);
            let angle = pos as f64 * freq;
            row[i] = libm::sin(angle);
            if i + 1 < d {
                row[i + 1] = libm::cos(angle);
            }
        }
    }
}
