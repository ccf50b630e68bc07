//! File formats, configuration and command implementations around the
//! `taste-core` models.

pub mod array;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod fsutil;
pub mod export;
pub mod manifest;
pub mod metrics;
pub mod pipeline;

pub use error::{AppError, AppResult};
