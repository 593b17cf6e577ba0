//! Kernels for long-video understanding with a linear recurrent language model.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numeric piece of
//! the pipeline:
//!
//! - [`rwkv`]: the wkv time-mixing recurrence in sequential, exponent-shifted,
//!   chunked and matrix-state forms, token shift, and the RWKV block.
//! - [`merge`]: sorted visual token merge (bipartite soft matching, size
//!   tracking, size-ordered re-sorting) and the keep-ratio schedule planner.
//! - [`vision`]: a small vision transformer with per-layer token merge and a
//!   two-layer connector.
//! - [`prompt`]: sandwich prompt assembly.
//! - [`attention`]: the causal attention baseline with a growing KV cache and
//!   the closed-form memory accountants for both architectures.
//! - [`autodiff`], [`model`], [`needle`], [`optim`]: the tape used to train the
//!   toy end-to-end model on the synthetic needle task.
#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod attention;
pub mod autodiff;
mod error;
pub mod ledger;
pub mod merge;
pub mod model;
pub mod needle;
pub mod optim;
pub mod prompt;
mod real;
pub mod rwkv;
pub mod tensor;
pub mod vision;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Mat;
