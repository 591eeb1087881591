//! Bidirectional stereo image compression.

pub mod attention;
pub mod backbone;
pub mod checkpoint;
pub mod coding;
pub mod config;
pub mod data;
pub mod entropy_model;
pub mod error;
pub mod eval;
pub mod model;
pub mod msssim;
pub mod nn;
pub mod report;
pub mod selftest;
pub mod train;

pub use error::{Error, Result};
