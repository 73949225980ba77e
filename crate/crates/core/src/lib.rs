//! Surrogate-based parameter optimization for robot assembly programs.
//!
//! The crate contains the domain model, a workcell simulator, dataset
//! quality checks, the shadow network, training diagnostics, relevance
//! propagation and the gradient-based optimizer.

pub mod diagnostics;
pub mod error;
pub mod lrp;
pub mod model;
pub mod net;
pub mod optimizer;
pub mod quality;
pub mod scenario;
pub mod sim;

pub use error::{CoreError, Result};
