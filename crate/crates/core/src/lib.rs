//! Differentiable 3D Gaussian splatting for sparse-view CT.
//!
//! The pipeline: synthesize projection data from a voxel phantom
//! ([`phantom`]), derive pinhole cameras from the scan geometry
//! ([`geometry`]), fit a Gaussian cloud ([`scene`]) to a subset of views by
//! rendering ([`rasterizer`]) and minimizing the composite loss ([`losses`])
//! with Adam ([`trainer`]), then score held-out views ([`metrics`]).
//! Persistence lives in [`io`].

pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod phantom;
pub mod losses;
pub mod metrics;
pub mod rasterizer;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
pub use geometry::{CameraPose, ScanGeometry};
pub use image::ProjectionImage;
pub use scene::{Ellipsoid, Gaussian, GaussianCloud};
