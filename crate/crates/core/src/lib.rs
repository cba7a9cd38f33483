//! Cone-beam CT simulation with adaptive, edge-projection driven view selection.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: circular cone-beam scan description and candidate angle grids.
//! - [`volume`]: the [`Volume`] and [`Projection`] value types.
//! - [`projector`]: ray-driven forward projection and its exact transpose.
//! - [`edges`]: per-slice Canny edge detection producing binary edge volumes.
//! - [`scoring`]: edge alignment, backprojection view distance, dispersion and
//!   the combined selection objective.
//! - [`recon`]: SIRT reconstruction.
//! - [`sim`]: phantoms, polychromatic measurements and linearization.
//! - [`metrics`]: NRMSE and SSIM.
//! - [`selection`]: the greedy view selection loop and the uniform / mask-overlap
//!   baselines.
//! - [`config`], [`io`], [`experiment`]: configuration, file formats and the
//!   end-to-end experiment driver used by the `epvs` binary.

pub mod config;
pub mod edges;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod projector;
pub mod recon;
pub mod scoring;
pub mod selection;
pub mod sim;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{candidate_angles, make_geometry, AngleGrid, ConeBeamGeometry, GeometryParams};
pub use volume::{EdgeVolume, Projection, Shape3, Volume};
