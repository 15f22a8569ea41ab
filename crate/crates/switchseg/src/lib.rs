//! switchseg: multi-criteria sequence segmentation.
//!
//! A character-level word segmenter built from K independent LSTM cells per
//! direction that are mixed at every timestep by a learned softmax switcher,
//! feeding a first-order linear-chain CRF. One parameter set serves any
//! number of segmentation criteria; each criterion is identified only by a
//! small trainable task embedding, which makes adapting to a new criterion a
//! matter of fitting 20 numbers.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense kernels, activations, seeded RNG, a finite-difference
//!   gradient oracle.
//! - [`corpus`]: segmented-corpus ingestion, BMES label conversion, splits,
//!   OOV bookkeeping.
//! - [`embeddings`]: vocabularies, unigram/bigram embedding tables, the
//!   growable task-embedding table, pretrained-vector loading.
//! - [`lstm`]: a single LSTM cell with analytic forward/backward.
//! - [`switch_lstm`]: the switched K-cell recurrence, bidirectional wrapper,
//!   and switch-weighted emission projection.
//! - [`crf`]: exact log-likelihood, Viterbi decoding, brute-force oracles.
//! - [`model`]: the assembled segmenter with end-to-end forward/backward.
//! - [`metrics`]: word-level P/R/F, OOV recall, switch-usage aggregation.
//! - [`synthgen`]: deterministic generator of conflicting-criteria corpora.
//! - [`trainer`]: multi-corpus sampling loop, Adam, early stopping, transfer.
//! - [`checkpoint`]: versioned binary container for parameters + vocab.
//! - [`cli`]: the operator-facing command surface.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod switch_lstm;
pub mod synthgen;
pub mod trainer;

mod error;

pub use error::{Error, Result};
