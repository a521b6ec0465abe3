//! Phase-coherent multistatic imaging of moving targets with asynchronous OFDM devices.

pub mod association;
pub mod channel;
pub mod clocks;
pub mod config;
pub mod detection;
pub mod error;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod sync;

pub use error::{Error, Result};
