//! Tile-based differentiable Gaussian rasterizer.
//!
//! Forward: project every Gaussian to a 2D splat, bin splats into 16x16
//! tiles, composite each pixel front-to-back. Backward: recompute each
//! tile's compositing state and chain the pixel gradients back through
//! alpha, the 2D conic and mean, down to the Gaussian parameters.
//!
//! Every pass is deterministic regardless of thread count: tiles are
//! processed independently and their partial gradients are reduced in
//! fixed tile order.

mod backward;
mod forward;
mod project;

pub use backward::{render_backward, GradientBuffer};
pub use forward::{render, Frame};
pub use project::{project_gaussians, SplatProjection, TileRect};

pub const TILE_SIZE: usize = 16;
/// Added to the diagonal of every 2D covariance (pixel²).
pub const LOW_PASS: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.99;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops before transmittance would fall below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;
/// Splat support: pixels with squared Mahalanobis distance above this get no
/// contribution (the 3σ ellipse).
pub const SUPPORT_MAHALANOBIS_SQ: f64 = 9.0;

/// Image dimensions `(width, height)` in pixels.
pub type ImageDims = (usize, usize);
