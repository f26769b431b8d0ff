use nalgebra::{Matrix2, Matrix3, Vector2};
use rayon::prelude::*;

use super::{ImageDims, ALPHA_MIN, LOW_PASS, SUPPORT_MAHALANOBIS_SQ, TILE_SIZE};
use crate::geometry::{jacobian_unchecked, CameraPose};
use crate::scene::{covariance_world, GaussianCloud};

/// Inclusive rectangle of tile indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl TileRect {
    pub fn contains(&self, tx: usize, ty: usize) -> bool {
        tx >= self.x0 && tx <= self.x1 && ty >= self.y0 && ty <= self.y1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplatProjection {
    pub gaussian_index: usize,
    pub mean2d: Vector2<f64>,
    /// Image-space covariance including the low-pass dilation.
    pub cov2d: Matrix2<f64>,
    pub depth: f64,
    pub alpha_peak: f64,
    pub tile_span: TileRect,
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub intensity: f64,
}

impl SplatProjection {
    /// Squared Mahalanobis distance of image point `(u, v)`.
    #[inline]
    pub fn mahalanobis_sq(&self, u: f64, v: f64) -> f64 {
        let dx = u - self.mean2d.x;
        let dy = v - self.mean2d.y;
        self.conic[0] * dx * dx + 2.0 * self.conic[1] * dx * dy + self.conic[2] * dy * dy
    }
}

/// Image-space covariance of a Gaussian, before dilation.
pub(crate) fn image_covariance(
    pose: &CameraPose,
    cov3: &Matrix3<f64>,
    x_cam: &nalgebra::Vector3<f64>,
) -> Matrix2<f64> {
    let t = jacobian_unchecked(pose.fx, pose.fy, x_cam) * pose.rotation;
    t * cov3 * t.transpose()
}

/// Pixel-index range `[lo, hi]` whose centers fall within `center ± radius`.
fn pixel_range(center: f64, radius: f64, len: usize) -> Option<(usize, usize)> {
    let lo = (center - radius - 0.5).ceil().max(0.0);
    let hi = (center + radius - 0.5).floor().min(len as f64 - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

fn project_one(
    cloud: &GaussianCloud,
    index: usize,
    pose: &CameraPose,
    dims: ImageDims,
) -> Option<SplatProjection> {
    let g = &cloud.gaussians[index];
    let alpha_peak = g.opacity();
    if alpha_peak < ALPHA_MIN {
        return None;
    }
    let x_cam = pose.world_to_camera(&g.position);
    if x_cam.z <= pose.near {
        return None;
    }
    let cov2d = image_covariance(pose, &covariance_world(g), &x_cam) + Matrix2::identity() * LOW_PASS;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(1, 0)];
    if !(det > 0.0) {
        return None;
    }
    let mean2d = pose.project(&x_cam);
    let k = SUPPORT_MAHALANOBIS_SQ.sqrt();
    let (px0, px1) = pixel_range(mean2d.x, k * cov2d[(0, 0)].sqrt(), dims.0)?;
    let (py0, py1) = pixel_range(mean2d.y, k * cov2d[(1, 1)].sqrt(), dims.1)?;
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    Some(SplatProjection {
        gaussian_index: index,
        mean2d,
        cov2d,
        depth: x_cam.z,
        alpha_peak,
        tile_span: TileRect {
            x0: px0 / TILE_SIZE,
            y0: py0 / TILE_SIZE,
            x1: px1 / TILE_SIZE,
            y1: py1 / TILE_SIZE,
        },
        conic: [cov2d[(1, 1)] / det, -off / det, cov2d[(0, 0)] / det],
        intensity: g.intensity,
    })
}

/// Projects every Gaussian that can contribute to the image, in cloud order.
pub fn project_gaussians(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    dims: ImageDims,
) -> Vec<SplatProjection> {
    (0..cloud.len())
        .into_par_iter()
        .with_min_len(256)
        .filter_map(|i| project_one(cloud, i, pose, dims))
        .collect()
}
