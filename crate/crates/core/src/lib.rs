//! Desk-scale laboratory for hallucination mitigation in reasoning models.
//!
//! The crate is organised bottom-up:
//!
//! * [`autodiff`] – reverse-mode differentiation over dense tensors.
//! * [`toy_world`] – synthetic scenes, questions and biased pretraining captions.
//! * [`model`] – a tiny causal attention model with low-rank adapters.
//! * [`compression`] – token importance scoring and chain pruning.
//! * [`inducers`] – chain revision and induced-hallucination negatives.
//! * [`losses`] – supervised and contrastive preference objectives.
//! * [`trainer`] – optimisation loops and checkpoints.
//! * [`metrics`] – CHAIR, POPE, sentence-level hallucination and propagation analysis.
//! * [`ib`] – exact discrete information-bottleneck quantities and theorem checks.
//! * [`pipeline`] – the staged experiment wiring used by the command-line tool.

pub mod autodiff;
pub mod compression;
pub mod error;
pub mod ib;
pub mod inducers;
pub mod jsonl;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seeds;
pub mod toy_world;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
