//! Simulator and library for over-the-air federated learning with
//! local-Newton aggregation.
//!
//! The crate is organized around the lifecycle of a training round:
//!
//! - [`data`]: LIBSVM parsing, synthetic data, device partitioning
//! - [`model`]: logistic loss family, CG Newton directions, line search
//! - [`channel`]: fading draws and the analog aggregation chain
//! - [`sdp`]: dense barrier solver for linear SDPs over Hermitian matrices
//! - [`sysopt`]: error-gap objective, DC-algorithm / SDR beamforming,
//!   Gibbs device selection
//! - [`analysis`]: convergence-theory quantities evaluated on live runs
//! - [`runtime`]: round orchestration, baselines, experiment driver

pub mod analysis;
pub mod channel;
pub mod data;
pub mod error;
pub mod model;
pub mod rng;
pub mod runtime;
pub mod sdp;
pub mod sysopt;

pub use error::{Error, Result};
