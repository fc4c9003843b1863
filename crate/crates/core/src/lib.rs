pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod numerics;
pub mod rng;
pub mod ssl;
pub mod videodata;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
