pub mod adjoint;
pub mod baseline;
pub mod dynamics;
pub mod error;
pub mod estimator;
pub mod io;
pub mod kernels;
pub mod metric;
pub mod observations;
pub mod optimize;
pub mod plot;
pub mod registry;
pub mod stochastic;
pub mod synth;

pub use error::{Error, Result};
