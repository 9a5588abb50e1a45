pub mod autodiff;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod experts;
pub mod gradcheck;
pub mod hyperbolic;
pub mod model;
pub mod params;
pub mod router;
pub mod synth_data;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
