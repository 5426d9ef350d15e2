//! Core algorithms for two-party conversion-model training.
//!
//! A *feature party* (the ads platform) holds input features and the model;
//! a *label party* (the advertiser) holds conversion labels inside a data
//! clean room. Training exchanges per-sample logit/parameter derivatives one
//! way and only batch-aggregated gradients the other way, so sample-level
//! label signal never leaves the clean room.
//!
//! This crate is `no_std`-compatible (`alloc` required) and holds everything
//! that is pure computation:
//!
//! - [`model`]: frozen dense base network with gated low-rank adapters,
//!   exact per-sample logit gradients, parameter flattening.
//! - [`privacy`]: label randomized response, keep probability, de-biased
//!   binary cross-entropy and its logit gradient.
//! - [`compress`]: lossy gradient codecs (stochastic 8-bit quantization,
//!   bfloat16) with exact byte accounting.
//! - [`wire`]: framed protocol messages between the two parties.
//! - [`cleanroom`]: the label-party session state machine (join labels,
//!   loss gradient, one matrix-vector product).
//! - [`audit`]: the least-squares label-recovery attack and regime sweeps.
//! - [`metrics`]: ROC-AUC, calibration ratio, log loss.
//! - [`datagen`]: synthetic conversion datasets with domain shift.
//!
//! IO, transports, training orchestration, and the CLI live in the
//! companion `splitcvr-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod audit;
mod bytes;
pub mod checkpoint;
pub mod cleanroom;
pub mod compress;
pub mod datagen;
pub mod error;
pub mod grad;
pub mod math;
pub mod matrix;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod privacy;
pub mod rng;
pub mod wire;

pub use error::Error;
pub use matrix::DenseMatrix;
