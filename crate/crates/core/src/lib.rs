pub mod autodiff;
pub mod checkpoint;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pgm;
pub mod prompt;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
