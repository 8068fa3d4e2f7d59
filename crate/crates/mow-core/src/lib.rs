//! Mixture-of-world-models (MoW) multi-task model-based RL, desk scale.
//!
//! The crate is organized around the training pipeline:
//! [`numcore`] provides the dense-tensor autodiff substrate and optimizers,
//! [`envsuite`] the synthetic multi-task pixel POMDPs and replay buffers,
//! [`perceptual`] the task-clustered categorical VAEs, [`temporal`] the
//! task-routed mixture-of-Transformer-experts dynamics core, [`losses`] the
//! world-model loss stack (harmonious + balance + free-bits KL), [`clustering`]
//! the warmup gradient-fingerprint clustering, and [`agent`] the λ-return
//! actor-critic trained in latent imagination. [`model`] assembles the pieces
//! into one parameter store and [`trainer`] implements the update steps that
//! the orchestrator (in the companion `mow` crate) drives.

pub mod agent;
pub mod clustering;
pub mod config;
pub mod envsuite;
pub mod error;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod perceptual;
pub mod rng;
pub mod temporal;
pub mod trainer;

pub use config::ModelConfig;
pub use error::{Error, Result};
