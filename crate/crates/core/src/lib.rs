//! Temporal action detection as conditional denoising diffusion over 1-D
//! proposals.
//!
//! Ground-truth intervals are corrupted with Gaussian noise during training
//! and a query-based decoder learns to reverse the corruption. At inference,
//! random proposals are denoised with deterministic DDIM steps and
//! cross-timestep selective conditioning into scored action intervals.

pub mod ablate;
pub mod assign;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod interval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
