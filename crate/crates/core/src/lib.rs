pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod nn;
pub mod pool;
pub mod strategies;

pub use error::{Error, Result};
