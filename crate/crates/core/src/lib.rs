pub mod config;
pub mod control;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod io_util;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod skilldb;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
