//! File formats, the chat-completion client, the scaling-curve runner and the
//! command line for `patchtrace`.
//!
//! The algorithms live in [`patchtrace_core`]; this crate adds everything that
//! touches the filesystem, the network or threads.

pub mod checkpoint;
pub mod cli;
pub mod curve;
pub mod error;
pub mod ingest;
pub mod llm;
pub mod preds;
pub mod traces;

pub use error::Error;
pub use patchtrace_core as core;
