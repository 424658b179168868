//! Desk-scale dual-objective language modeling.
//!
//! One small transformer is trained on an autoregressive objective and a
//! masked-diffusion objective at the same time. The two modes share every
//! parameter and differ only in the input sequence and the attention mask.
//! Around that core live a byte-level BPE tokenizer, four likelihood
//! protocols for zero-shot multiple-choice evaluation, a repetition × ratio
//! sweep runner, Gaussian-process analysis of sweep results and a small
//! select/aggregate interpreter that checks the left-shift construction
//! used to justify next-token prediction in bidirectional mode.
//!
//! Data-parallel loops (per-sequence gradients, per-example scoring, sweep
//! cells, GPR restarts) go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Reductions
//! always happen in input order, so results are identical either way.

pub mod corpus;
pub mod error;
pub mod evals;
pub mod fixture;
pub mod gpr;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod model;
pub mod objectives;
pub mod par;
pub mod rasp;
pub mod real;
pub mod seed;
pub mod sweep;
pub mod training;

pub use error::{Error, Result};
pub use real::Real;
