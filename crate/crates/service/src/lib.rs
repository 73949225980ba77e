//! HTTP service for the shadow-model workflow: a file-backed store, job
//! management, the capability descriptor and published response schemas.
//!
//! [`app::App`] holds every workflow operation; the HTTP handlers in
//! [`http`] and the command-line driver both call into it.

pub mod app;
pub mod capabilities;
pub mod demo;
pub mod dto;
pub mod error;
pub mod http;
pub mod jobs;
pub mod schemas;
pub mod store;

pub use app::App;
pub use error::{ApiError, ApiResult, ErrorBody};
