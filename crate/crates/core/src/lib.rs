//! SSL-conditioned singing voice synthesis training stack.

pub mod acoustic;
pub mod conditioning;
pub mod dim_select;
pub mod discriminator;
pub mod error;
pub mod io_formats;
pub mod nn;
pub mod pitch_objective;
pub mod pitch_predictor;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, ErrorClass, Result};
