pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod report;
pub mod rng;
pub mod selection;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
