//! Simulation, conventional encoding and evaluation of microphone-array
//! Ambisonics.

pub mod array;
pub mod baseline;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod scene;
pub mod sh;

pub use error::{Error, Result};
