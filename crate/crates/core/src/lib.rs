pub mod analysis;
pub mod cli;
pub mod config;
pub mod correlation;
pub mod dynamics;
pub mod error;
pub mod filter;
pub mod physics;
pub mod shots;

pub use error::{Error, Result};
