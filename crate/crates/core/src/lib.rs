//! Fairness-aware spatio-temporal demand forecasting with a disentangled
//! sequence VAE.
//!
//! The crate covers the full pipeline: rasterizing raw mobility records onto
//! a grid ([`raster`]), generating planted-bias scenarios ([`synth`]), the
//! variational model and its regularizers ([`model`], [`regularizers`]),
//! training and forecasting ([`train`]), fairness metrics ([`fairness`]) and
//! the command harness behind the `fairdrl` binary ([`harness`]).

pub mod error;
pub mod fairness;
pub mod fdt;
pub mod gradcheck;
pub mod grid;
pub mod harness;
pub mod model;
pub mod nn;
pub mod probe;
pub mod raster;
pub mod regularizers;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{FairError, Result};
pub use tensor::Tensor;
