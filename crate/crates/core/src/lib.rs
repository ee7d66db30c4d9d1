//! Two-stream partially supervised multi-label training.
//!
//! A deterministic stream and an uncertainty-injected probabilistic stream
//! share one staged encoder. Both streams are decoupled into per-class
//! features by text-conditioned attention pooling, and the probabilistic
//! stream is tied to the deterministic one through feature distillation
//! (MMD), self-distillation on known classes and pseudo-label consistency
//! on unknown classes.

pub mod ablation;
pub mod audit;
pub mod autodiff;
mod binio;
pub mod config;
pub mod decoupling;
pub mod dsu;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;

pub use autodiff::{AdamConfig, AdamState, Graph, Tensor, Var};
pub use error::{Error, Result};
