//! Federated learning of Gaussian-process priors with PAC-Bayesian
//! certificates.
//!
//! The library simulates a federation of clients that jointly learn a
//! *distribution over GP priors* (a hyper-posterior represented by a set of
//! SVGD particles). Each particle parameterizes a deep-mean / deep-kernel GP;
//! clients personalize by conditioning the GP on their own data, which is
//! exactly the Gibbs posterior the bounds reason about. On top of the
//! training loop the crate provides:
//!
//! * closed-form PAC-Bayesian bound evaluation at the client, server, and
//!   new-client level, including the differential-privacy penalty,
//! * a DP training variant (per-client gradient clipping + Laplace noise),
//! * a synthetic polynomial task generator and the evaluation metrics
//!   (RSMSE, calibration error) used to compare training modes,
//! * a config-driven experiment runner backing the `pacpfl` CLI.
//!
//! All arithmetic is `f64`; every run is fully determined by (config, seed).

#![forbid(unsafe_code)]

pub mod config;
pub mod data;
pub mod error;
pub mod fed;
pub mod gp;
pub mod metrics;
pub mod nn;
pub mod pacbayes;
pub mod runner;
pub mod svgd;
mod util;

pub use error::{Error, Result};
