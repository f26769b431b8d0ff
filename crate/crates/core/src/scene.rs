//! The optimizable Gaussian scene and its ellipsoid initialization.

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const IDENTITY_QUAT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

/// One anisotropic Gaussian: 12 scalar parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub position: Vector3<f64>,
    /// Log of the per-axis standard deviation.
    pub log_scale: Vector3<f64>,
    /// Quaternion `(w, x, y, z)`; normalized before use.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    pub intensity: f64,
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(&normalized_quat(&self.rotation))
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_world(self)
    }

    pub fn normalize_rotation(&mut self) {
        self.rotation = normalized_quat(&self.rotation);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub scene_extent: f64,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>, scene_extent: f64) -> Result<Self> {
        if !(scene_extent.is_finite() && scene_extent > 0.0) {
            return Err(Error::invalid(format!(
                "scene_extent must be positive, got {scene_extent}"
            )));
        }
        Ok(Self {
            gaussians,
            scene_extent,
        })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// Parameter count (12 per Gaussian).
    pub fn parameter_count(&self) -> usize {
        12 * self.len()
    }

    /// Round every parameter to the nearest `f32`, the precision stored on disk.
    pub fn quantize_f32(&mut self) {
        let q = |v: f64| v as f32 as f64;
        for g in &mut self.gaussians {
            g.position = g.position.map(q);
            g.log_scale = g.log_scale.map(q);
            g.rotation = g.rotation.map(q);
            g.opacity_logit = q(g.opacity_logit);
            g.intensity = q(g.intensity);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
}

impl Ellipsoid {
    /// Default brain prior for a cubic field of view of side `fov_side`
    /// centred on the isocenter.
    pub fn brain_prior(fov_side: f64) -> Self {
        Self {
            center: Vector3::zeros(),
            semi_axes: Vector3::new(0.4, 0.4, 0.5) * fov_side,
        }
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let d = (p - self.center).component_div(&self.semi_axes);
        d.norm_squared() <= 1.0
    }

    pub fn bounding_radius(&self) -> f64 {
        self.semi_axes.max()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn normalized_quat(q: &[f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    q.map(|c| c / n)
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// World-space covariance `R diag(s²) Rᵀ`.
pub fn covariance_world(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation_matrix();
    let s2 = g.scale().map(|s| s * s);
    r * Matrix3::from_diagonal(&s2) * r.transpose()
}

/// Seeds `n` Gaussians uniformly inside the solid ellipsoid.
///
/// Initial isotropic scale is the mean distance to the three nearest
/// neighbours, clamped to `[1e-4, scene_extent]`.
pub fn init_ellipsoid_cloud(
    ell: &Ellipsoid,
    n: usize,
    seed: u64,
    base_intensity: f64,
    base_opacity: f64,
) -> Result<GaussianCloud> {
    if n == 0 {
        return Err(Error::invalid("gaussian count must be at least 1"));
    }
    if ell.semi_axes.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::invalid(format!(
            "ellipsoid semi-axes must be positive, got {:?}",
            ell.semi_axes.as_slice()
        )));
    }
    if !(base_opacity > 0.0 && base_opacity < 1.0) {
        return Err(Error::invalid(format!(
            "base opacity must lie in (0, 1), got {base_opacity}"
        )));
    }
    if !(base_intensity >= 0.0 && base_intensity.is_finite()) {
        return Err(Error::invalid("base intensity must be non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions = Vec::with_capacity(n);
    while positions.len() < n {
        let u = Vector3::new(
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
            rng.random_range(-1.0..=1.0),
        );
        if u.norm_squared() <= 1.0 {
            positions.push(ell.center + u.component_mul(&ell.semi_axes));
        }
    }

    let extent = ell.bounding_radius();
    let nn = mean_knn_distance(&positions, 3);
    let opacity_logit = logit(base_opacity);
    let gaussians = positions
        .iter()
        .zip(nn)
        .map(|(p, d)| {
            let s = d.unwrap_or(0.1 * extent).clamp(1e-4, extent).ln();
            Gaussian {
                position: *p,
                log_scale: Vector3::repeat(s),
                rotation: IDENTITY_QUAT,
                opacity_logit,
                intensity: base_intensity,
            }
        })
        .collect();
    GaussianCloud::new(gaussians, extent)
}

/// Mean distance to the `k` nearest other points (fewer if the set is small),
/// using a uniform grid.
pub(crate) fn mean_knn_distance(points: &[Vector3<f64>], k: usize) -> Vec<Option<f64>> {
    let n = points.len();
    if n < 2 {
        return vec![None; n];
    }
    let mut lo = points[0];
    let mut hi = points[0];
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let span = (hi - lo).map(|s| s.max(1e-12));
    let cell = (span.x * span.y * span.z / n as f64).cbrt().max(span.max() / 256.0);
    let dims = span.map(|s| ((s / cell).floor() as usize + 1).min(1 << 10));
    let cell_of = |p: &Vector3<f64>| -> [usize; 3] {
        let c = (p - lo) / cell;
        [
            (c.x as usize).min(dims.x - 1),
            (c.y as usize).min(dims.y - 1),
            (c.z as usize).min(dims.z - 1),
        ]
    };
    let flat = |c: [usize; 3]| (c[2] * dims.y + c[1]) * dims.x + c[0];
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); dims.x * dims.y * dims.z];
    for (i, p) in points.iter().enumerate() {
        buckets[flat(cell_of(p))].push(i);
    }

    let k = k.min(n - 1);
    let max_ring = dims.max();
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let c = cell_of(p);
            let mut best: Vec<f64> = Vec::with_capacity(k + 1);
            for ring in 0..=max_ring {
                let r = ring as isize;
                for dz in -r..=r {
                    for dy in -r..=r {
                        for dx in -r..=r {
                            if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                                continue;
                            }
                            let (x, y, z) = (
                                c[0] as isize + dx,
                                c[1] as isize + dy,
                                c[2] as isize + dz,
                            );
                            if x < 0
                                || y < 0
                                || z < 0
                                || x >= dims.x as isize
                                || y >= dims.y as isize
                                || z >= dims.z as isize
                            {
                                continue;
                            }
                            for &j in &buckets[flat([x as usize, y as usize, z as usize])] {
                                if j == i {
                                    continue;
                                }
                                let d = (points[j] - p).norm();
                                if best.len() < k || d < best[k - 1] {
                                    let at = best.partition_point(|b| *b <= d);
                                    best.insert(at, d);
                                    best.truncate(k);
                                }
                            }
                        }
                    }
                }
                if best.len() == k && best[k - 1] <= ring as f64 * cell {
                    break;
                }
            }
            Some(best.iter().sum::<f64>() / best.len() as f64)
        })
        .collect()
}
