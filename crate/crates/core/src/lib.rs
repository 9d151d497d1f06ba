//! Dense non-rigid 2D motion estimation directly from accelerated MRI k-space.
//!
//! The crate is organized as a pipeline:
//! - [`kspace`]: centered unitary FFTs, phase ramps, multi-coil forward/adjoint
//!   sampling operators and coil compression.
//! - [`sampling`]: Cartesian (VISTA-like) and golden-angle radial trajectories.
//! - [`phantom`]: an analytic cardiac-like cine phantom with ground-truth
//!   displacement fields and segmentation masks.
//! - [`motion`]: displacement-field warping and synthesis utilities.
//! - [`lap`]: classical Local All-Pass multiscale registration.
//! - [`autodiff`] + [`model`]: a tape-based reverse-mode autodiff engine and
//!   the multi-resolution attention network built on it.
//! - [`train`], [`metrics`], [`nps`]: losses, the training loop, evaluation
//!   metrics and noise-power-spectrum analysis.
//! - [`cxa`], [`viz`]: array serialization and PGM/PPM visualization.

pub mod cxa;
pub mod error;
pub mod grid;
pub mod kspace;
pub mod lap;
pub mod metrics;
pub mod motion;
pub mod nps;
pub mod phantom;
pub mod sampling;
pub mod train;
pub mod viz;

pub mod autodiff;
pub mod model;

pub use error::{Error, Result};
pub use grid::{
    CoilSensitivityMap, ComplexGrid, ComplexImage, DisplacementField, LabelGrid, MultiCoilKSpace,
    RealGrid,
};
