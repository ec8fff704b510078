//! A decoder language model paired with a parametric MLP memory that is
//! trained to imitate a nearest-neighbour retriever.
//!
//! The crate implements the full pipeline:
//!
//! 1. [`corpus`] — build a word-level vocabulary, tokenize text, and split it
//!    into train/validation/test streams.
//! 2. [`lm`] — train a small decoder-only transformer on the training split.
//! 3. [`datastore`] — run the trained model over the training split once and
//!    record `(hidden state, next token)` pairs from an intermediate layer.
//! 4. [`knn`] — turn nearest neighbours of a query hidden state into a sparse
//!    next-token distribution, and precompute those distributions for every
//!    datastore entry so they can serve as training targets.
//! 5. [`memory`] — train an all-MLP network to map hidden states directly to
//!    the retriever's distributions, replacing the search at inference time.
//! 6. [`inference`] — interpolate model and memory predictions, score
//!    perplexity with a sliding window, and measure per-token latency.
//! 7. [`analysis`] — fit power laws to perplexity-vs-scale measurements and
//!    summarise how sharp or flat the predicted distributions are.
//!
//! [`pipeline`] chains the stages behind content-hash provenance checks so a
//! run directory can be rebuilt incrementally, and the `mlpmem` binary exposes
//! each stage as a subcommand. The `examples/` directory demonstrates the
//! library piece by piece on synthetic data.
//!
//! All model math is generic over [`linalg::Scalar`] so the same code runs in
//! `f32` for production and `f64` for finite-difference gradient checks.

pub mod analysis;
pub mod checkpoint;
pub mod corpus;
pub mod datastore;
pub mod error;
pub mod inference;
pub mod io;
pub mod knn;
pub mod linalg;
pub mod lm;
pub mod memory;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod textgen;

pub use error::{Error, Result};
