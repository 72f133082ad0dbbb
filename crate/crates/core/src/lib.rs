pub mod error;
pub mod geometry;
pub mod numcore;
pub mod embedding;
pub mod model;
#[cfg(test)]
pub(crate) mod oracle;
pub mod suppression;
pub mod synthdata;
pub mod training;
pub mod evaluation;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
