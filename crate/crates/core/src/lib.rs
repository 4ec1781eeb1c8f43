pub mod baselines;
pub mod calibnet;
pub mod error;
pub mod formats;
pub mod harness;
pub mod nn;
pub mod signal;
pub mod srs;
pub mod synth;

pub use error::{Error, Result};
