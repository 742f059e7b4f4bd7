pub mod cli;
pub mod data;
pub mod diffcore;
pub mod encoder;
pub mod error;
pub mod keys;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};
