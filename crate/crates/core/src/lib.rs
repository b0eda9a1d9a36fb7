pub mod dataset;
pub mod error;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod scenegen;
pub mod selftest;
pub mod training;

pub use error::{Error, Result};
