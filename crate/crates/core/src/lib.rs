pub mod augment;
pub mod cli;
pub mod autograd;
pub mod config;
pub mod encoders;
pub mod eval;
pub mod error;
pub mod losses;
pub mod synthcorpus;
pub mod trainer;

pub use error::{Error, Result};
