//! Affine autoregressive normalizing flows for causal inference.
//!
//! The crate fits flows by maximum likelihood and uses the variable ordering of
//! the autoregressive structure as a causal ordering:
//!
//! * [`discovery`] decides the direction between two variables by comparing
//!   held-out log-likelihoods of flows trained under both orderings;
//! * [`inference`] samples interventional distributions and answers
//!   counterfactual queries on root variables by inverting a trained flow;
//! * [`sem_sim`] provides ground-truth structural equation models and their
//!   analytic answers.
//!
//! The numeric core ([`diffnet`], [`flow`]) is generic over [`Real`]; the
//! aliases below fix it to `f64`, which the rest of the crate uses.

pub mod data_io;
pub mod diffnet;
pub mod discovery;
pub mod error;
pub mod flow;
pub mod inference;
pub mod noise;
pub mod scalar;
pub mod sem_sim;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;
pub use training::{DataMatrix, FittedFlow, TrainConfig};

/// Double-precision flow, the type used by training and the causal tooling.
pub type Flow = flow::AffineFlow<f64>;
pub type Mlp = diffnet::MlpParams<f64>;
pub type Adam = diffnet::AdamState<f64>;
