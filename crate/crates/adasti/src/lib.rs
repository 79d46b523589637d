//! AdaSTI: conditional-diffusion spatio-temporal imputation.
//!
//! The pipeline pre-imputes missing entries with a bidirectional S4 network
//! (BiS4PI), extracts a global conditional tensor with the spatio-temporal
//! conditionalizer (STC), and denoises diffusion targets with a gated
//! self/cross-attention residual stack (NAST). Training, sampling, metrics,
//! baselines and the CLI live in the `harness`-level modules.

pub mod aux_block;
pub mod baseline;
pub mod bis4pi;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nast;
pub mod nn;
pub mod stc;
pub mod synth;
pub mod s4;
pub mod tape;
pub mod train;

pub use error::{AdastiError, Result};
