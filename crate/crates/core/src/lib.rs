//! Software twin of a proprioceptive optical-waveguide membrane.
//!
//! The crate covers the whole chain from a deformed membrane to a
//! reconstructed point cloud:
//!
//! - [`geometry`]: indentation and bend fields, point clouds, path profiles.
//! - [`optics`]: LED/PD layout and the phenomenological light-transport model.
//! - [`readout`]: ADC emulation, preprocessing, normalization, frame timing,
//!   the wire codec and stream alignment.
//! - [`tensor`]: a small reverse-mode differentiation core with the layers,
//!   optimizers and schedulers the models need.
//! - [`model`]: the point-cloud autoencoder, the PD-to-latent regressor,
//!   Chamfer metrics, evaluation and the hyperparameter sweep.
//! - [`importance`]: grouped SAGE values and progressive feature inclusion.
//! - [`dataset`]: synthetic dataset generation and the on-disk container.

pub mod dataset;
pub mod geometry;
pub mod importance;
pub mod io;
pub mod model;
pub mod optics;
pub mod readout;
pub mod spatial;
pub mod tensor;

mod error;

pub use error::{Error, Result};
