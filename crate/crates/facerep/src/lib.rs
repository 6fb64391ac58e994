//! Std companion of `facerep-core`: file formats, dataset ingestion,
//! benchmark orchestration and the command-line interface.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod formats;

pub use error::{Error, Result};
