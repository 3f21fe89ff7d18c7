pub mod adapt;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod pseudo;

pub use error::{Result, SfdaError};
