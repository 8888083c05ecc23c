//! Rendering-oriented point cloud attribute compression.
//!
//! Per-point colors are compressed by a sparse-tensor autoencoder with a
//! hyperprior entropy model. Training minimizes the estimated bitrate plus the
//! error of multiview images produced by the differentiable point renderer in
//! [`render`]. Geometry is assumed to be available losslessly at the decoder.

pub mod attention;
pub mod bench;
pub mod diff;
pub mod entropy;
pub mod error;
pub mod io;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod pipeline;
pub mod range_coder;
pub mod render;
pub mod sparse;
pub mod suites;

pub use error::{Error, Result};
