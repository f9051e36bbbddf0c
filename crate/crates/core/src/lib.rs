//! Policy-driven adaptive multi-instance learning over feature bags.
//!
//! The crate implements the full pipeline: a deterministic synthetic
//! benchmark generator and binary bag format, a registry of instance-sampling
//! strategies (policy-guided and fixed-grouping baselines), transformer-based
//! step-token fusion and class-token classification, reward shaping, PPO
//! optimization of the sampling policy, and a training/evaluation/ablation
//! harness with checkpointing and metrics.

pub mod ablate;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod fsutil;
pub mod nn;
pub mod optim;
pub(crate) mod params;
pub mod plot;
pub mod policy;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod rng;
pub mod schedule;
pub mod train;
pub mod sampler;
pub mod sffr;
pub mod tcm;

pub use error::{Error, Result};
