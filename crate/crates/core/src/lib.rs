pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor5;
