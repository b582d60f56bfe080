//! Active multi-object 6D pose estimation lab.
//!
//! A camera moves over a hemisphere of viewpoints around a bin of identical
//! objects. Each view yields noisy pose hypotheses that are fused across
//! views with a ground-truth-free verification score; an attention module
//! picks one object to reason about and a PPO-trained policy chooses the
//! next camera placement under time and travel budgets.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod config;
pub mod env;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod geom;
pub mod metrics;
pub mod nn;
pub mod parallel;
pub mod ppo;
pub mod scene;
pub mod seeds;
pub mod stats;

pub use error::{AplError, Result};
