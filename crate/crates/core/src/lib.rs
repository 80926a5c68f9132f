//! Case-weighted adaptive power priors for borrowing external controls in
//! time-to-event trials under a piecewise-exponential proportional-hazards model.

pub mod calibration;
pub mod cli;
pub mod case_weights;
pub mod commensurate;
pub mod error;
pub mod gaussian;
pub mod inference;
pub mod kde;
pub mod seed;
pub mod sim;
pub mod stats;
pub mod survival;

pub use error::{Error, Result};
