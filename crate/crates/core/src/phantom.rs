//! Synthetic head phantoms and their digitally reconstructed radiographs.
//!
//! Radiographs use the additive convention: a pixel is the line integral of
//! attenuation along the source-to-pixel ray, divided by one constant per
//! scan (the largest integral over the scan's orbit) so every view of the
//! scan lands in `[0, 1]` with relative brightness preserved.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{orbit_poses, CameraPose, ScanGeometry};
use crate::image::ProjectionImage;
use crate::io::{write_image, write_manifest, PhantomInfo, SceneManifest, ViewEntry};

/// Scalar attenuation on a regular grid. `values` is x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPhantom {
    pub dims: [usize; 3],
    pub spacing: Vector3<f64>,
    /// World position of the center of voxel `(0, 0, 0)`.
    pub origin: Vector3<f64>,
    pub values: Vec<f64>,
}

impl VoxelPhantom {
    pub fn new(
        dims: [usize; 3],
        spacing: Vector3<f64>,
        origin: Vector3<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid(format!(
                "{} values for dims {:?}",
                values.len(),
                dims
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid("voxel spacing must be positive"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("attenuation values must be finite and non-negative"));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            values,
        })
    }

    /// A grid of zeros centred on the isocenter, cubic voxels spanning `fov_side`.
    pub fn centered(dims: [usize; 3], fov_side: f64) -> Self {
        let spacing = Vector3::new(
            fov_side / dims[0] as f64,
            fov_side / dims[1] as f64,
            fov_side / dims[2] as f64,
        );
        let origin = Vector3::from_fn(|i, _| -0.5 * fov_side + 0.5 * spacing[i]);
        Self {
            dims,
            spacing,
            origin,
            values: vec![0.0; dims.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin + Vector3::new(x as f64, y as f64, z as f64).component_mul(&self.spacing)
    }

    /// Fills every voxel from a density function of its world-space center.
    pub fn fill(&mut self, f: impl Fn(&Vector3<f64>) -> f64 + Sync) {
        let [nx, ny, _] = self.dims;
        let origin = self.origin;
        let spacing = self.spacing;
        self.values
            .par_chunks_mut(nx * ny)
            .enumerate()
            .for_each(|(z, slab)| {
                for y in 0..ny {
                    for x in 0..nx {
                        let p = origin
                            + Vector3::new(x as f64, y as f64, z as f64).component_mul(&spacing);
                        slab[y * nx + x] = f(&p);
                    }
                }
            });
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|v| *v == 0.0)
    }

    pub fn info(&self) -> PhantomInfo {
        PhantomInfo {
            dims: self.dims,
            spacing: [self.spacing.x, self.spacing.y, self.spacing.z],
        }
    }

    /// Trilinear interpolation; zero outside the grid.
    #[inline]
    pub fn sample(&self, p: &Vector3<f64>) -> f64 {
        let g = (p - self.origin).component_div(&self.spacing);
        let (fx, fy, fz) = (g.x.floor(), g.y.floor(), g.z.floor());
        let (tx, ty, tz) = (g.x - fx, g.y - fy, g.z - fz);
        let (ix, iy, iz) = (fx as isize, fy as isize, fz as isize);
        let [nx, ny, nz] = self.dims.map(|d| d as isize);
        if ix < -1 || iy < -1 || iz < -1 || ix >= nx || iy >= ny || iz >= nz {
            return 0.0;
        }
        let at = |x: isize, y: isize, z: isize| -> f64 {
            if x < 0 || y < 0 || z < 0 || x >= nx || y >= ny || z >= nz {
                0.0
            } else {
                self.values[self.index(x as usize, y as usize, z as usize)]
            }
        };
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(at(ix, iy, iz), at(ix + 1, iy, iz), tx);
        let c10 = lerp(at(ix, iy + 1, iz), at(ix + 1, iy + 1, iz), tx);
        let c01 = lerp(at(ix, iy, iz + 1), at(ix + 1, iy, iz + 1), tx);
        let c11 = lerp(at(ix, iy + 1, iz + 1), at(ix + 1, iy + 1, iz + 1), tx);
        lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
    }

    /// Box where the interpolant can be non-zero (one voxel beyond the centers).
    fn support(&self) -> (Vector3<f64>, Vector3<f64>) {
        let last = Vector3::from_fn(|i, _| self.dims[i] as f64);
        (
            self.origin - self.spacing,
            self.origin + last.component_mul(&self.spacing),
        )
    }
}

/// Solid ellipsoid rotated about z, contributing a constant attenuation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipsoidComponent {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
    pub yaw: f64,
    pub value: f64,
}

impl EllipsoidComponent {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let r = Matrix3::new(c, s, 0.0, -s, c, 0.0, 0.0, 0.0, 1.0);
        let local = (r * (p - self.center)).component_div(&self.semi_axes);
        local.norm_squared() <= 1.0
    }
}

/// Analytic head model: skull shell, brain, and seeded inclusions.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub skull_outer: EllipsoidComponent,
    pub skull_inner: EllipsoidComponent,
    pub brain: EllipsoidComponent,
    pub inclusions: Vec<EllipsoidComponent>,
}

pub const SKULL_ATTENUATION: f64 = 0.8;
pub const BRAIN_ATTENUATION: f64 = 0.25;

impl HeadModel {
    /// Deterministic model for a cubic field of view of side `fov_side`.
    pub fn new(fov_side: f64, seed: u64) -> Self {
        let h = 0.5 * fov_side;
        let outer = Vector3::new(0.69, 0.80, 0.86) * h;
        let inner = outer - Vector3::repeat(0.06 * h);
        let skull_outer = EllipsoidComponent {
            center: Vector3::zeros(),
            semi_axes: outer,
            yaw: 0.0,
            value: SKULL_ATTENUATION,
        };
        let skull_inner = EllipsoidComponent {
            semi_axes: inner,
            ..skull_outer
        };
        let brain = EllipsoidComponent {
            value: BRAIN_ATTENUATION,
            ..skull_inner
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(3..=5);
        let mut inclusions = Vec::with_capacity(count);
        while inclusions.len() < count {
            let u = Vector3::new(
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
                rng.random_range(-1.0..=1.0),
            );
            if u.norm_squared() > 1.0 {
                continue;
            }
            let semi = Vector3::new(
                rng.random_range(0.08..0.22),
                rng.random_range(0.08..0.22),
                rng.random_range(0.08..0.22),
            ) * h;
            inclusions.push(EllipsoidComponent {
                center: u.component_mul(&inner) * 0.55,
                semi_axes: semi,
                yaw: rng.random_range(0.0..std::f64::consts::PI),
                value: rng.random_range(-0.15..0.35),
            });
        }
        Self {
            skull_outer,
            skull_inner,
            brain,
            inclusions,
        }
    }

    /// Sum of the attenuations of every component containing `p`, clamped to `[0, 1]`.
    pub fn density(&self, p: &Vector3<f64>) -> f64 {
        if !self.skull_outer.contains(p) {
            return 0.0;
        }
        let mut v = if self.skull_inner.contains(p) {
            self.brain.value
        } else {
            self.skull_outer.value
        };
        for inc in &self.inclusions {
            if inc.contains(p) {
                v += inc.value;
            }
        }
        v.clamp(0.0, 1.0)
    }
}

/// Voxelizes the analytic head model over a cubic FOV centred on the isocenter.
pub fn make_head_phantom(dims: [usize; 3], seed: u64, fov_side: f64) -> Result<VoxelPhantom> {
    if dims.iter().any(|d| *d < 8) {
        return Err(Error::invalid(format!("phantom dims must be >= 8, got {dims:?}")));
    }
    if !(fov_side.is_finite() && fov_side > 0.0) {
        return Err(Error::invalid("fov_side must be positive"));
    }
    let model = HeadModel::new(fov_side, seed);
    let mut ph = VoxelPhantom::centered(dims, fov_side);
    ph.fill(|p| model.density(p));
    Ok(ph)
}

fn ray_box(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    lo: &Vector3<f64>,
    hi: &Vector3<f64>,
) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-300 {
            if origin[i] < lo[i] || origin[i] > hi[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (a, b) = ((lo[i] - origin[i]) * inv, (hi[i] - origin[i]) * inv);
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 > t0).then_some((t0, t1))
}

/// How line integrals are evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quadrature {
    /// Exact integral of the trilinear interpolant: the ray is cut where it
    /// crosses the planes through voxel centers, the interpolant is a cubic
    /// on each piece, and Simpson's rule integrates cubics exactly.
    Exact,
    /// Fixed-step midpoint rule.
    Midpoint { step: f64 },
}

/// Line integral of the phantom along the ray `origin + t·dir`, `t ≥ 0`,
/// with `dir` of unit length.
pub fn ray_integral(ph: &VoxelPhantom, origin: &Vector3<f64>, dir: &Vector3<f64>, quad: Quadrature) -> f64 {
    let (lo, hi) = ph.support();
    let Some((t0, t1)) = ray_box(origin, dir, &lo, &hi) else {
        return 0.0;
    };
    let at = |t: f64| ph.sample(&(origin + dir * t));
    match quad {
        Quadrature::Midpoint { step } => {
            let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
            let dt = (t1 - t0) / n as f64;
            (0..n).map(|k| at(t0 + (k as f64 + 0.5) * dt)).sum::<f64>() * dt
        }
        Quadrature::Exact => {
            let mut cuts = vec![t0, t1];
            for i in 0..3 {
                if dir[i].abs() < 1e-12 {
                    continue;
                }
                let grid = |t: f64| (origin[i] + t * dir[i] - ph.origin[i]) / ph.spacing[i];
                let (g0, g1) = (grid(t0), grid(t1));
                let (lo_k, hi_k) = (g0.min(g1).ceil() as i64, g0.max(g1).floor() as i64);
                for k in lo_k..=hi_k {
                    let t = (ph.origin[i] + k as f64 * ph.spacing[i] - origin[i]) / dir[i];
                    if t > t0 && t < t1 {
                        cuts.push(t);
                    }
                }
            }
            cuts.sort_by(f64::total_cmp);
            let mut sum = 0.0;
            let mut prev = at(cuts[0]);
            for w in cuts.windows(2) {
                let (a, b) = (w[0], w[1]);
                let end = at(b);
                sum += (b - a) / 6.0 * (prev + 4.0 * at(0.5 * (a + b)) + end);
                prev = end;
            }
            sum
        }
    }
}

/// Unnormalized line integrals for every pixel of one view.
pub fn drr_line_integrals(
    ph: &VoxelPhantom,
    pose: &CameraPose,
    dims: (usize, usize),
    quad: Quadrature,
) -> Result<Vec<f64>> {
    if let Quadrature::Midpoint { step } = quad {
        if !(step.is_finite() && step > 0.0) {
            return Err(Error::invalid("sampling step must be positive"));
        }
    }
    let (w, h) = dims;
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().try_for_each(|(y, row)| {
        for (x, v) in row.iter_mut().enumerate() {
            let dir = pose.pixel_ray(x as f64 + 0.5, y as f64 + 0.5);
            if !dir.iter().all(|c| c.is_finite()) {
                return Err(Error::Internal(format!("degenerate ray at pixel ({x}, {y})")));
            }
            *v = ray_integral(ph, &pose.camera_center, &dir, quad);
        }
        Ok(())
    })?;
    Ok(out)
}

/// Midpoint sampling step used for cross-checks: half the smallest voxel spacing.
pub fn default_step(ph: &VoxelPhantom) -> f64 {
    0.5 * ph.spacing.min()
}

/// A normalized radiograph. `normalization` is the per-scan divisor.
pub fn drr_project(
    ph: &VoxelPhantom,
    pose: &CameraPose,
    geom: &ScanGeometry,
    normalization: f64,
) -> Result<ProjectionImage> {
    if !(normalization.is_finite() && normalization > 0.0) {
        return Err(Error::invalid("normalization must be positive"));
    }
    let raw = drr_line_integrals(ph, pose, geom.image_dims(), Quadrature::Exact)?;
    let pixels = raw.into_iter().map(|v| (v / normalization).min(1.0)).collect();
    ProjectionImage::new(geom.image_width, geom.image_height, pixels, pose.view_angle_deg)
}

/// Normalized radiographs for the whole orbit plus the normalization
/// constant (largest raw integral; 1 for an empty phantom).
pub fn project_orbit(ph: &VoxelPhantom, geom: &ScanGeometry) -> Result<(Vec<ProjectionImage>, f64)> {
    let poses = orbit_poses(geom)?;
    let raw = poses
        .iter()
        .map(|p| drr_line_integrals(ph, p, geom.image_dims(), Quadrature::Exact))
        .collect::<Result<Vec<_>>>()?;
    let max = raw.iter().flatten().fold(0.0f64, |m, v| m.max(*v));
    let norm = if max > 0.0 { max } else { 1.0 };
    let images = raw
        .into_iter()
        .zip(&poses)
        .map(|(r, p)| {
            let px = r.into_iter().map(|v| v / norm).collect();
            ProjectionImage::new(geom.image_width, geom.image_height, px, p.view_angle_deg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((images, norm))
}

pub fn view_file_name(k: usize) -> String {
    format!("view_{k:04}.png")
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one PNG per orbit view plus `manifest.json` into `out_dir`.
pub fn generate_dataset(ph: &VoxelPhantom, geom: &ScanGeometry, out_dir: &Path) -> Result<SceneManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (images, norm) = project_orbit(ph, geom)?;
    images
        .par_iter()
        .enumerate()
        .try_for_each(|(k, img)| write_image(img, &out_dir.join(view_file_name(k))))?;
    let views = images
        .iter()
        .enumerate()
        .map(|(k, img)| ViewEntry {
            angle_deg: img.view_angle_deg,
            image_path: view_file_name(k),
            split_hint: None,
            extra: Default::default(),
        })
        .collect();
    let mut manifest = SceneManifest::new(*geom, norm, views);
    manifest.phantom = Some(ph.info());
    write_manifest(&manifest, &out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_at_angle;

    #[test]
    fn rejects_tiny_dims() {
        assert!(make_head_phantom([8, 8, 7], 1, 200.0).is_err());
        assert!(make_head_phantom([8, 8, 8], 1, 200.0).is_ok());
    }

    #[test]
    fn center_voxel_is_sum_of_components() {
        let dims = [33, 33, 33];
        let ph = make_head_phantom(dims, 4, 200.0).unwrap();
        let model = HeadModel::new(200.0, 4);
        let p = ph.voxel_center(16, 16, 16);
        assert!(p.norm() < 1e-9);
        let mut sum = BRAIN_ATTENUATION;
        for inc in &model.inclusions {
            if inc.contains(&p) {
                sum += inc.value;
            }
        }
        assert_eq!(ph.values[ph.index(16, 16, 16)], sum.clamp(0.0, 1.0));
    }

    #[test]
    fn outside_skull_is_zero_and_values_bounded() {
        let ph = make_head_phantom([24, 24, 24], 9, 200.0).unwrap();
        assert_eq!(ph.values[ph.index(0, 0, 0)], 0.0);
        assert!(ph.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let model = HeadModel::new(200.0, 9);
        assert!((3..=5).contains(&model.inclusions.len()));
    }

    #[test]
    fn deterministic_for_seed() {
        let a = make_head_phantom([16, 16, 16], 5, 200.0).unwrap();
        let b = make_head_phantom([16, 16, 16], 5, 200.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_phantom_projects_to_zero() {
        let ph = VoxelPhantom::centered([8, 8, 8], 200.0);
        let geom = ScanGeometry {
            image_width: 16,
            image_height: 16,
            n_views: 2,
            angular_step_deg: 90.0,
            ..ScanGeometry::default()
        };
        let (imgs, norm) = project_orbit(&ph, &geom).unwrap();
        assert_eq!(norm, 1.0);
        assert!(imgs.iter().all(|i| i.pixels.iter().all(|p| *p == 0.0)));
    }

    #[test]
    fn trilinear_sample_hits_voxel_values() {
        let mut ph = VoxelPhantom::centered([8, 8, 8], 80.0);
        let k = ph.index(3, 4, 5);
        ph.values[k] = 2.0;
        assert_eq!(ph.sample(&ph.voxel_center(3, 4, 5)), 2.0);
        let half = ph.voxel_center(3, 4, 5) + Vector3::new(5.0, 0.0, 0.0);
        assert!((ph.sample(&half) - 1.0).abs() < 1e-12);
        assert_eq!(ph.sample(&Vector3::new(500.0, 0.0, 0.0)), 0.0);
    }

    #[test]
    fn pixels_within_unit_range() {
        let ph = make_head_phantom([24, 24, 24], 2, 200.0).unwrap();
        let geom = ScanGeometry {
            image_width: 24,
            image_height: 24,
            n_views: 8,
            angular_step_deg: 45.0,
            ..ScanGeometry::default()
        };
        let (imgs, norm) = project_orbit(&ph, &geom).unwrap();
        assert!(norm > 0.0);
        let max = imgs.iter().flat_map(|i| i.pixels.iter()).fold(0.0f64, |m, v| m.max(*v));
        assert_eq!(max, 1.0);
        assert!(imgs.iter().all(|i| i.pixels.iter().all(|p| (0.0..=1.0).contains(p))));
        let single = drr_project(&ph, &pose_at_angle(&geom, 45.0), &geom, norm).unwrap();
        assert_eq!(single.pixels, imgs[1].pixels);
    }
}
