//! Files, pipeline stages and the command-line driver around `rflow-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod exec;
pub mod format;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod task;

pub use error::{LabError, LabResult};
