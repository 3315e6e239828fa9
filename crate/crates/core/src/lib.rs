//! Memory-efficient episodic meta-learning.
//!
//! The crate implements the LITE training scheme: a meta-learner forwards a
//! task's *entire* support set but back-propagates only a random subset of
//! size `H`, scaling the subset's gradient contribution by `N/H`. The result
//! is an unbiased estimate of the full-support gradient whose activation
//! memory scales with `H` instead of `N`.
//!
//! Layout:
//!
//! * [`tensor`] / [`tape`] / [`ops`] — reverse-mode autodiff with explicit
//!   gradient-tracking control and the value-preserving straight-through
//!   scaled combinator.
//! * [`params`] — named parameter stores, gradient maps, initializers.
//! * [`model`] — feature extractors, the deep-set encoder, FiLM generators,
//!   and the prototype / linear-head / Mahalanobis classifier heads.
//! * [`episode`] — task construction and synthetic few-shot data.
//! * [`lite`] — the split forward pass and per-task training step.
//! * [`train`] — meta-training loop, optimizers, evaluation.
//! * [`gradcheck`] — finite-difference oracle and the bias/RMSE experiment
//!   harness comparing LITE against sub-sampled tasks.
//!
//! The crate is `no_std` (with `alloc`); all file and terminal I/O lives in
//! the companion CLI crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod episode;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod lite;
pub mod model;
pub mod ops;
pub mod params;
pub mod real;
pub mod rng;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{GradMap, ParamStore};
pub use real::{DType, Real};
pub use tape::{NodeId, Tape};
pub use tensor::Tensor;
