pub mod alpha;
pub mod encoder;
pub mod error;
pub mod face;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;

pub use error::{Error, Result};
pub mod adversary;
pub mod losses;
pub mod morphnet;
pub mod dataset;
pub mod synth;
pub mod checkpoint;
pub mod trainer;
pub mod protocol;
pub mod cli;
