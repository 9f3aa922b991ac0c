//! Decoder-only transformer reasoner over trace tokens.
//!
//! The transformer blocks, layer norms and the sinusoidal position table are
//! frozen at initialization. Training updates only the token embedding matrix
//! and the classification head that reads the final position. The split is
//! structural: [`Reasoner`] keeps the two groups in separate fields, and the
//! optimizer only ever receives the trainable one.

mod model;
mod nn;
mod train;

pub use model::{FrozenBackbone, HeadMode, ParamGroup, Reasoner, ReasonerConfig, Trainable};
pub use train::{predict, train, Example, TrainHyper, TrainLog};
