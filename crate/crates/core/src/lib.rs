//! One-shot federated learning in which uploaded client classifiers steer a
//! server-side diffusion model toward each client's distribution.
//!
//! Clients train a batch-normalized classifier and upload it once. The
//! server runs guided reverse diffusion: at each step the clean-sample
//! estimate is scored by the client model (cross-entropy on the requested
//! class plus a match of batch-norm statistics) and the gradient bends the
//! predicted noise. The labeled synthetic set then trains the global model
//! by fine-tuning or by distillation from the client models.
//!
//! The examples directory walks through each capability; `flmg` is a thin
//! command-line wrapper around [`cli`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod guidance;
pub mod io;
pub mod nn;
pub mod report;
pub mod rng;
pub mod stages;
pub mod theory;

pub use error::{Error, Result};
