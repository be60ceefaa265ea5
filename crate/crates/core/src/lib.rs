//! Reprogramming of frozen graph neural networks.
//!
//! A pre-trained GNN is treated as a read-only asset. Instead of fine-tuning,
//! this crate adapts the *task* to the model:
//!
//! - learned feature padding for dimension-mismatched inputs (`padding`),
//! - gradient-guided edge deletion on the downstream graph (`slimming`),
//! - a small learnable meta-graph attached to every downstream graph (`metagraph`),
//! - Gumbel-softmax selection over aggregation functions (`reagg`).
//!
//! Supporting layers: a dense-tensor reverse-mode differentiation engine
//! (`tensor`, `tape`), a graph data model with JSON serialization and a
//! stochastic-block-model generator (`graph`, `dataset`, `synth`), a tiny
//! model zoo (`model`, `metrics`), and an experiment harness (`harness`).
//!
//! Everything is deterministic under a single 64-bit seed; see `rng` for the
//! exact generator. With the default `parallel` feature, independent seeds and
//! dense kernels run on rayon; disabling it yields a sequential build with
//! bit-identical outputs.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod metagraph;
pub mod metrics;
pub mod model;
pub mod padding;
pub mod reagg;
pub mod rng;
pub mod slimming;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
