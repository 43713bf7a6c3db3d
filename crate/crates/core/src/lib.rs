//! Co-attention Siamese networks for unsupervised video object segmentation,
//! small enough to train and verify on a CPU.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`graph`], [`gradcheck`]: `f64` tensors, a reverse-mode tape
//!   and finite-difference verification.
//! * [`coattention`]: affinity variants, normalisation, summaries, gating and
//!   multi-reference fusion.
//! * [`net`]: the shared embedder, segmentation head and the pair, query and
//!   static forward paths.
//! * [`train`], [`infer`], [`metrics`]: optimisation, video inference and
//!   region-similarity scoring.
//! * [`synth`], [`netpbm`], [`corpus`]: the synthetic corpus and its files.
//! * [`checkpoint`], [`config`], [`pipeline`]: run plumbing used by the CLI.

pub mod checkpoint;
pub mod coattention;
pub mod config;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod infer;
pub mod metrics;
pub mod net;
pub mod netpbm;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
