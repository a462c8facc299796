//! Sequential variational inference for state-space models.
//!
//! Implements the deep Kalman filter (DKF) objective and its importance
//! weighted variant (IW-DKF) on top of a small reverse-mode autodiff engine,
//! together with a Lorenz-attractor parameter estimation workload and an exact
//! linear-Gaussian Kalman oracle for checking bound properties.

pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod error;
pub mod generative;
pub mod gradcheck;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod training;

pub use autodiff::{Gradients, Graph, Tensor, Var};
pub use error::{Error, Result};
