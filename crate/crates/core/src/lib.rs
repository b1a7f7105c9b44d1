//! State-sequence inference for black-box control systems.
//!
//! Given multivariate input/output traces of a controller (for example an
//! autopilot sampled at 5 Hz), the crate infers which internal state the
//! system is in at every step. It contains:
//!
//! - [`trace`]: traces, change-point annotations, label sequences, CSV/JSON I/O
//! - [`simgen`]: a deterministic synthetic autopilot producing labeled flights
//! - [`cpd`]: penalized change-point detection baselines
//! - [`nn`]: a convolutional-recurrent state classifier written from scratch
//! - [`baselines`]: sliding-window ridge and decision-tree classifiers
//! - [`eval`]: tolerance-based change-point scores and classification reports
//! - [`pipeline`]: experiment orchestration and report emission
//!
//! Neural-network math is generic over [`Scalar`]; the aliases below fix the
//! two precisions used in practice.

pub mod baselines;
pub mod cpd;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod simgen;
pub mod trace;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Model32 = nn::Model<f32>;
pub type Model64 = nn::Model<f64>;
pub type Checkpoint32 = nn::Checkpoint<f32>;
pub type Checkpoint64 = nn::Checkpoint<f64>;
pub type Adam32 = nn::Adam<f32>;
pub type Adam64 = nn::Adam<f64>;
