//! Energy-calibrated VAEs: generator, energy correction, Langevin calibration,
//! conditional restoration and the training loop tying them together.

pub mod checkpoint;
pub mod data;
pub mod ebm;
pub mod error;
pub mod eval;
pub mod flow;
pub mod nets;
pub mod restoration;
pub mod sampler;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};
