//! Shared fixtures and independent oracles for the integration tests.
#![allow(dead_code)]

use nalgebra::{Matrix2x3, Matrix3, Vector3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ctsplat::geometry::{pose_at_angle, CameraPose};
use ctsplat::{Gaussian, GaussianCloud, ScanGeometry};

pub fn geometry_for(size: usize) -> ScanGeometry {
    ScanGeometry {
        image_width: size,
        image_height: size,
        ..ScanGeometry::default()
    }
}

/// In-memory dataset: the DRR orbit of a head phantom, no files involved.
pub fn phantom_dataset(dims: usize, seed: u64, geom: &ScanGeometry) -> ctsplat::io::Dataset {
    let ph = ctsplat::phantom::make_head_phantom([dims; 3], seed, geom.fov_side).unwrap();
    let (images, norm) = ctsplat::phantom::project_orbit(&ph, geom).unwrap();
    let views = (0..geom.n_views)
        .map(|k| ctsplat::io::ViewEntry {
            angle_deg: geom.view_angle(k),
            image_path: format!("view_{k:04}.png"),
            split_hint: None,
            extra: Default::default(),
        })
        .collect();
    let mut manifest = ctsplat::io::SceneManifest::new(*geom, norm, views);
    manifest.phantom = Some(ph.info());
    ctsplat::io::Dataset::from_parts(manifest, std::path::PathBuf::new(), images).unwrap()
}

/// Shared pieces of the radiograph oracles.
pub mod drr {
    use ctsplat::phantom::VoxelPhantom;
    use nalgebra::Vector3;

    /// Entry and exit parameters of the ray `origin + t·dir` through the
    /// cube `[lo, hi]³` (slab method).
    pub fn slab(origin: &Vector3<f64>, dir: &Vector3<f64>, lo: f64, hi: f64) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for i in 0..3 {
            if dir[i] == 0.0 {
                if origin[i] < lo || origin[i] > hi {
                    return None;
                }
                continue;
            }
            let a = (lo - origin[i]) / dir[i];
            let b = (hi - origin[i]) / dir[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t1 > t0).then_some((t0, t1))
    }

    pub fn slab_chord(origin: &Vector3<f64>, dir: &Vector3<f64>, lo: f64, hi: f64) -> f64 {
        slab(origin, dir, lo, hi).map_or(0.0, |(t0, t1)| (t1 - t0) * dir.norm())
    }

    /// Distance from a point on the cube surface to the nearest cube edge.
    pub fn edge_distance(p: &Vector3<f64>, half: f64) -> f64 {
        let mut d: Vec<f64> = p.iter().map(|c| half - c.abs()).collect();
        d.sort_by(f64::total_cmp);
        // The smallest is ~0 (the face the point lies on); the next is the edge gap.
        d[1]
    }

    /// 64³ grid over a 200 mm field with a unit cube whose faces fall
    /// halfway between voxel centers, so the trilinear interpolant crosses
    /// 0.5 exactly on the faces.
    pub fn unit_cube() -> (VoxelPhantom, f64) {
        let mut ph = VoxelPhantom::centered([64, 64, 64], 200.0);
        let half = 12.0 * ph.spacing.x;
        ph.fill(|p| if p.amax() < half { 1.0 } else { 0.0 });
        (ph, half)
    }

    /// Averages the phantom with its mirror image under x → -x (and y → -y
    /// as well when `flip_y`, which makes it symmetric under a half turn).
    pub fn symmetrize(ph: &VoxelPhantom, flip_y: bool) -> VoxelPhantom {
        let mut out = ph.clone();
        let [nx, ny, nz] = ph.dims;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let my = if flip_y { ny - 1 - y } else { y };
                    let a = ph.values[ph.index(x, y, z)];
                    let b = ph.values[ph.index(nx - 1 - x, my, z)];
                    let k = out.index(x, y, z);
                    out.values[k] = 0.5 * (a + b);
                }
            }
        }
        out
    }

    /// Head phantom plus a dense block on the +y side, mirrored in x: the
    /// views at θ and θ + 180° are mirror images but not equal.
    pub fn mirror_phantom(dims: usize) -> VoxelPhantom {
        let base = ctsplat::phantom::make_head_phantom([dims; 3], 3, 200.0).unwrap();
        let mut ph = base.clone();
        ph.fill(|p| if (p - Vector3::new(0.0, 40.0, 10.0)).amax() < 20.0 { 1.0 } else { 0.0 });
        for (v, b) in ph.values.iter_mut().zip(&base.values) {
            *v += b;
        }
        symmetrize(&ph, false)
    }

    pub fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    /// Column-mirrored copy of a square-or-not `w`-wide image.
    pub fn mirror_columns(pixels: &[f64], w: usize) -> Vec<f64> {
        (0..pixels.len()).map(|p| pixels[(p / w) * w + (w - 1 - p % w)]).collect()
    }
}

pub fn random_pose(rng: &mut ChaCha8Rng, geom: &ScanGeometry) -> CameraPose {
    pose_at_angle(geom, rng.random_range(0.0..360.0))
}

pub fn random_unit_quat(rng: &mut ChaCha8Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if n > 0.2 && n <= 1.0 {
            return q.map(|c| c / n);
        }
    }
}

/// Knobs for random scenes.
#[derive(Debug, Clone, Copy)]
pub struct SceneSpec {
    pub n: usize,
    /// Gaussians are placed uniformly inside a ball of this radius (mm).
    pub radius: f64,
    pub sigma: (f64, f64),
    pub opacity: (f64, f64),
    /// Largest ratio between the biggest and smallest axis of one Gaussian.
    pub max_anisotropy: f64,
}

pub fn random_cloud(rng: &mut ChaCha8Rng, spec: &SceneSpec) -> GaussianCloud {
    let gaussians = (0..spec.n)
        .map(|_| {
            let position = loop {
                let p = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                if p.norm_squared() <= 1.0 {
                    break p * spec.radius;
                }
            };
            let base: f64 = rng.random_range(spec.sigma.0..spec.sigma.1);
            let ratio: f64 = rng.random_range(0.0..1.0f64).powi(2) * (spec.max_anisotropy.ln());
            let log_scale = Vector3::new(
                base.ln(),
                base.ln() - rng.random_range(0.0..=ratio.max(0.0)),
                base.ln() - ratio,
            );
            let opacity: f64 = rng.random_range(spec.opacity.0..spec.opacity.1);
            Gaussian {
                position,
                log_scale,
                rotation: random_unit_quat(rng),
                opacity_logit: (opacity / (1.0 - opacity)).ln(),
                intensity: rng.random_range(0.0..1.0),
            }
        })
        .collect();
    GaussianCloud::new(gaussians, spec.radius.max(1.0)).unwrap()
}

/// Brute-force reference renderer: every pixel walks one global
/// depth-sorted list of all Gaussians. Written independently of the
/// library's tiled implementation.
pub mod oracle {
    use super::*;

    pub const LOW_PASS: f64 = 0.3;

    #[derive(Debug, Clone, Copy)]
    pub struct Thresholds {
        pub support: f64,
        pub alpha_min: f64,
        pub alpha_max: f64,
        pub t_min: f64,
    }

    impl Default for Thresholds {
        fn default() -> Self {
            Self {
                support: 9.0,
                alpha_min: 1.0 / 255.0,
                alpha_max: 0.99,
                t_min: 1e-4,
            }
        }
    }

    impl Thresholds {
        fn scaled(&self, f: f64) -> Self {
            Self {
                support: self.support * f,
                alpha_min: self.alpha_min * f,
                alpha_max: self.alpha_max * f,
                t_min: self.t_min * f,
            }
        }
    }

    #[derive(Debug, Clone, Copy)]
    pub struct Splat {
        pub index: usize,
        pub depth: f64,
        pub u: f64,
        pub v: f64,
        pub inv: [f64; 3],
        pub peak: f64,
        pub intensity: f64,
    }

    fn rotation(q: &[f64; 4]) -> Matrix3<f64> {
        let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        Matrix3::new(
            w * w + x * x - y * y - z * z,
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            w * w - x * x + y * y - z * z,
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            w * w - x * x - y * y + z * z,
        )
    }

    pub fn splats(cloud: &GaussianCloud, pose: &CameraPose) -> Vec<Splat> {
        let mut out = Vec::new();
        for (index, g) in cloud.gaussians.iter().enumerate() {
            let peak = 1.0 / (1.0 + (-g.opacity_logit).exp());
            if peak < 1.0 / 255.0 {
                continue;
            }
            let xc = pose.rotation * (g.position - pose.camera_center);
            if xc.z <= pose.near {
                continue;
            }
            let r = rotation(&g.rotation);
            let s = Matrix3::from_diagonal(&g.log_scale.map(f64::exp));
            let m = r * s;
            let sigma = m * m.transpose();
            let z = xc.z;
            let j = Matrix2x3::new(
                pose.fx / z,
                0.0,
                -pose.fx * xc.x / (z * z),
                0.0,
                pose.fy / z,
                -pose.fy * xc.y / (z * z),
            );
            let t = j * pose.rotation;
            let c = t * sigma * t.transpose();
            let (a, b, d) = (c[(0, 0)] + LOW_PASS, 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)] + LOW_PASS);
            let det = a * d - b * b;
            if det <= 0.0 {
                continue;
            }
            out.push(Splat {
                index,
                depth: z,
                u: pose.fx * xc.x / z + pose.cx,
                v: pose.fy * xc.y / z + pose.cy,
                inv: [d / det, -b / det, a / det],
                peak,
                intensity: g.intensity,
            });
        }
        out.sort_by(|p, q| p.depth.total_cmp(&q.depth).then(p.index.cmp(&q.index)));
        out
    }

    /// What happened to one splat at one pixel.
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum Event {
        OutsideSupport,
        TooFaint,
        Blended { capped: bool },
        Stopped,
    }

    pub fn pixel(splats: &[Splat], px: f64, py: f64, th: &Thresholds, events: Option<&mut Vec<Event>>) -> (f64, f64) {
        let mut log = events;
        let mut t = 1.0;
        let mut color = 0.0;
        for s in splats {
            let (dx, dy) = (px - s.u, py - s.v);
            let q = s.inv[0] * dx * dx + 2.0 * s.inv[1] * dx * dy + s.inv[2] * dy * dy;
            let ev = if q > th.support {
                Event::OutsideSupport
            } else {
                let raw = s.peak * (-0.5 * q).exp();
                if raw < th.alpha_min {
                    Event::TooFaint
                } else {
                    let alpha = raw.min(th.alpha_max);
                    if t * (1.0 - alpha) < th.t_min {
                        Event::Stopped
                    } else {
                        color += s.intensity * alpha * t;
                        t *= 1.0 - alpha;
                        Event::Blended {
                            capped: raw > th.alpha_max,
                        }
                    }
                }
            };
            if let Some(l) = log.as_deref_mut() {
                l.push(ev);
            }
            if ev == Event::Stopped {
                break;
            }
        }
        (color, t)
    }

    /// `(pixels, opacity map)`.
    pub fn render(cloud: &GaussianCloud, pose: &CameraPose, dims: (usize, usize), background: f64) -> (Vec<f64>, Vec<f64>) {
        let sp = splats(cloud, pose);
        let th = Thresholds::default();
        let mut px = Vec::with_capacity(dims.0 * dims.1);
        let mut op = Vec::with_capacity(dims.0 * dims.1);
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let (c, t) = pixel(&sp, x as f64 + 0.5, y as f64 + 0.5, &th, None);
                px.push(c + t * background);
                op.push(1.0 - t);
            }
        }
        (px, op)
    }

    /// True when no pixel's compositing decisions change if any threshold
    /// moves by a relative `margin`, and no two splats are near a depth tie.
    /// Finite differences are only meaningful on such scenes.
    pub fn is_stable(cloud: &GaussianCloud, pose: &CameraPose, dims: (usize, usize), margin: f64) -> bool {
        let sp = splats(cloud, pose);
        if sp.len() != cloud.len() {
            return false;
        }
        if sp.windows(2).any(|w| (w[1].depth - w[0].depth).abs() < 1e-3) {
            return false;
        }
        let base = Thresholds::default();
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut reference = Vec::new();
                pixel(&sp, cx, cy, &base, Some(&mut reference));
                for f in [1.0 - margin, 1.0 + margin] {
                    let mut ev = Vec::new();
                    pixel(&sp, cx, cy, &base.scaled(f), Some(&mut ev));
                    if ev != reference {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// Relative error in the form used by every gradient check.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central finite difference.
pub fn central_diff(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Mutable access to parameter `k` (0..12) of a Gaussian in optimizer order.
pub fn param_mut(g: &mut Gaussian, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut g.position[k],
        3..=5 => &mut g.log_scale[k - 3],
        6..=9 => &mut g.rotation[k - 6],
        10 => &mut g.opacity_logit,
        11 => &mut g.intensity,
        _ => panic!("parameter slot {k}"),
    }
}

pub const PARAM_NAMES: [&str; 12] = [
    "position.x",
    "position.y",
    "position.z",
    "log_scale.x",
    "log_scale.y",
    "log_scale.z",
    "rotation.w",
    "rotation.x",
    "rotation.y",
    "rotation.z",
    "opacity_logit",
    "intensity",
];

pub fn grad_of(buf: &ctsplat::rasterizer::GradientBuffer, i: usize, k: usize) -> f64 {
    match k {
        0..=2 => buf.position[i][k],
        3..=5 => buf.log_scale[i][k - 3],
        6..=9 => buf.rotation[i][k - 6],
        10 => buf.opacity_logit[i],
        11 => buf.intensity[i],
        _ => panic!("parameter slot {k}"),
    }
}

pub mod gradcheck {
    use super::*;
    use ctsplat::losses::{beta_loss, dssim_loss, l1_loss, total_loss, tv_loss, LossWeights};
    use ctsplat::rasterizer::{render, render_backward};
    use ctsplat::ProjectionImage;
    use rand::SeedableRng;

    pub const H: f64 = 1e-5;
    /// Step for the piecewise-linear terms (L1, TV). Central differences are
    /// exact for them as long as no kink is crossed, and the inputs keep
    /// every kink at least 0.02 away, so a larger step only reduces roundoff.
    pub const H_LINEAR: f64 = 5e-3;
    pub const TOL: f64 = 1e-4;

    pub struct Scene {
        pub cloud: GaussianCloud,
        pub pose: CameraPose,
        pub dims: (usize, usize),
        pub background: f64,
        pub d_pixels: Vec<f64>,
        pub d_opacity: Vec<f64>,
    }

    /// A random 8×8 scene of at most five Gaussians that is far from every
    /// compositing threshold. Returns the scene and how many draws were
    /// rejected.
    pub fn scene(seed: u64) -> (Scene, usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let geom = geometry_for(8);
        let dims = (8, 8);
        let mut rejected = 0;
        loop {
            let n = rng.random_range(1..=5);
            // A quarter of the scenes use near-opaque splats to exercise the
            // alpha cap and early termination; a third are strongly anisotropic.
            let opacity = if rng.random_bool(0.25) { (0.97, 0.999) } else { (0.4, 0.8) };
            let max_anisotropy = if rng.random_bool(0.33) { 100.0 } else { 3.0 };
            let spec = SceneSpec {
                n,
                radius: 50.0,
                sigma: (12.0, 40.0),
                opacity,
                max_anisotropy,
            };
            let cloud = random_cloud(&mut rng, &spec);
            let pose = random_pose(&mut rng, &geom);
            if !oracle::is_stable(&cloud, &pose, dims, 1e-3) {
                rejected += 1;
                continue;
            }
            let p = dims.0 * dims.1;
            let background = if rng.random_bool(0.2) { rng.random_range(0.0..0.5) } else { 0.0 };
            let d_pixels = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let d_opacity = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            return (
                Scene {
                    cloud,
                    pose,
                    dims,
                    background,
                    d_pixels,
                    d_opacity,
                },
                rejected,
            );
        }
    }

    fn objective(s: &Scene, cloud: &GaussianCloud) -> f64 {
        let img = render(cloud, &s.pose, s.dims, s.background).unwrap();
        let op = img.opacity.as_ref().unwrap();
        img.pixels
            .iter()
            .zip(&s.d_pixels)
            .map(|(c, d)| c * d)
            .chain(op.iter().zip(&s.d_opacity).map(|(a, d)| a * d))
            .sum()
    }

    /// Largest relative error over every parameter of every Gaussian, with a
    /// description of where it occurred.
    pub fn raster_max_error(s: &Scene) -> (f64, String) {
        let grads = render_backward(&s.cloud, &s.pose, s.dims, s.background, &s.d_pixels, &s.d_opacity).unwrap();
        let mut worst = (0.0, String::new());
        for i in 0..s.cloud.len() {
            for k in 0..12 {
                let numeric = central_diff(H, |h| {
                    let mut c = s.cloud.clone();
                    *param_mut(&mut c.gaussians[i], k) += h;
                    objective(s, &c)
                });
                let analytic = grad_of(&grads, i, k);
                let e = rel_err(analytic, numeric);
                if e > worst.0 || worst.1.is_empty() {
                    worst = (e, format!("gaussian {i} {}: analytic {analytic:e}, numeric {numeric:e}", PARAM_NAMES[k]));
                }
            }
        }
        worst
    }

    fn image(w: usize, px: Vec<f64>, opacity: Option<Vec<f64>>) -> ProjectionImage {
        let h = px.len() / w;
        let mut img = ProjectionImage::new(w, h, px, 0.0).unwrap();
        img.opacity = opacity;
        img
    }

    /// Random 16×16 rendered/target/opacity triple. Rendered values sit on
    /// a jittered lattice with unequal neighbours and targets avoid the
    /// rendered values, so every L1 and TV kink is at least 0.02 away; the
    /// opacity map stays clear of the Beta clamp.
    fn loss_inputs(rng: &mut ChaCha8Rng) -> (ProjectionImage, ProjectionImage) {
        let w = 16;
        let p = w * w;
        let mut level = vec![0usize; p];
        for y in 0..w {
            for x in 0..w {
                level[y * w + x] = loop {
                    let k = rng.random_range(0..30);
                    let left = x > 0 && level[y * w + x - 1] == k;
                    let up = y > 0 && level[(y - 1) * w + x] == k;
                    if !left && !up {
                        break k;
                    }
                };
            }
        }
        let r: Vec<f64> = level
            .iter()
            .map(|k| 0.05 + 0.03 * *k as f64 + rng.random_range(-0.005..0.005))
            .collect();
        let t: Vec<f64> = r
            .iter()
            .map(|v| loop {
                let t = rng.random_range(0.0..1.0);
                if (t - v).abs() > 0.02 {
                    break t;
                }
            })
            .collect();
        let o: Vec<f64> = (0..p).map(|_| rng.random_range(0.01..0.99)).collect();
        (image(w, r, Some(o)), image(w, t, None))
    }

    /// Largest relative error over every pixel of every loss term and of
    /// the weighted total.
    pub fn loss_max_error(seed: u64) -> (f64, String) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rendered, target) = loss_inputs(&mut rng);
        let weights = LossWeights {
            lambda_l1: rng.random_range(0.1..1.0),
            lambda_dssim: rng.random_range(0.1..1.0),
            lambda_beta: rng.random_range(0.1..1.0),
            lambda_tv: rng.random_range(0.01..0.1),
        };
        type Term = fn(&ProjectionImage, &ProjectionImage) -> (f64, Vec<f64>);
        let terms: [(&str, Term, f64); 3] = [
            ("l1", |r, t| l1_loss(r, t).unwrap(), H_LINEAR),
            ("dssim", |r, t| dssim_loss(r, t).unwrap(), H),
            ("tv", |r, _| tv_loss(r).unwrap(), H_LINEAR),
        ];
        let mut worst = (0.0, String::new());
        let mut record = |e: f64, what: String| {
            if e > worst.0 || worst.1.is_empty() {
                worst = (e, what);
            }
        };
        for (name, f, step) in terms {
            let (_, grad) = f(&rendered, &target);
            for p in 0..rendered.len() {
                let numeric = central_diff(step, |h| {
                    let mut r = rendered.clone();
                    r.pixels[p] += h;
                    f(&r, &target).0
                });
                record(rel_err(grad[p], numeric), format!("{name} pixel {p}"));
            }
        }
        let op = rendered.opacity.clone().unwrap();
        let (_, g_beta) = beta_loss(Some(&op)).unwrap();
        let report = total_loss(&rendered, &target, &weights).unwrap();
        for p in 0..rendered.len() {
            let numeric = central_diff(H, |h| {
                let mut o = op.clone();
                o[p] += h;
                beta_loss(Some(&o)).unwrap().0
            });
            record(rel_err(g_beta[p], numeric), format!("beta pixel {p}"));
            let numeric = central_diff(H, |h| {
                let mut r = rendered.clone();
                r.pixels[p] += h;
                total_loss(&r, &target, &weights).unwrap().total
            });
            record(rel_err(report.d_pixels[p], numeric), format!("total d_pixels {p}"));
            let numeric = central_diff(H, |h| {
                let mut r = rendered.clone();
                r.opacity.as_mut().unwrap()[p] += h;
                total_loss(&r, &target, &weights).unwrap().total
            });
            record(rel_err(report.d_opacity[p], numeric), format!("total d_opacity {p}"));
        }
        worst
    }
}
