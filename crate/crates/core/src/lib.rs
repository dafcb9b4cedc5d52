// SPDX-License-Identifier: MIT OR Apache-2.0

//! # featrace-core
//!
//! Cross-snapshot crosscoders: sparse dictionaries with one encoder/decoder
//! pair per training snapshot of a language model and a single shared sparse
//! code. The crate trains them on activation shards and analyses how the
//! learned features evolve across snapshots.
//!
//! ## Modules
//!
//! - [`store`]: `.acts` / `.toks` shard formats, snapshot manifests, aligned
//!   batch streaming.
//! - [`crosscoder`]: the model, decoder-norm-gated JumpReLU, losses and
//!   analytic gradients; `.xcck` checkpoints.
//! - [`train`]: Adam, learning-rate schedule, initialization search and the
//!   snapshot-sharded training loop.
//! - [`evolution`]: decoder-norm trajectories, peaks, lifetimes, projections,
//!   feature dimensionality and splitting search.
//! - [`attribution`]: attribution / attribution patching with integrated
//!   gradients and ablation experiments.
//! - [`probe`]: logistic probes for feature firing.
//! - [`ngram`]: unigram/bigram tables, KL divergences and entropy floors.
//! - [`rules`]: top-activation index and rule-based feature classifiers.
//! - [`annotate`]: complexity-scoring client for chat-completion endpoints.
//! - [`synth`]: synthetic snapshot generator with planted ground truth.
//! - [`report`]: CSV tables, SVG charts and run metadata.

pub mod annotate;
pub mod attribution;
pub mod crosscoder;
pub mod error;
pub mod evolution;
pub mod ngram;
pub mod probe;
pub mod report;
pub mod rules;
pub mod stats;
pub mod store;
pub mod synth;
pub mod train;

pub use crosscoder::{CrosscoderModel, ForwardRecord, Gradients, LossConfig};
pub use error::{Error, Result};
pub use store::{AlignedBatch, SnapshotManifest};
