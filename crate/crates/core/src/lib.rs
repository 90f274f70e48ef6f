pub mod cli;
pub mod dataset;
pub mod descriptions;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod loss;
pub mod retrieval;
pub mod store;
pub mod synthetic;
pub mod targets;
pub mod trainer;

pub use error::{Error, Result};
