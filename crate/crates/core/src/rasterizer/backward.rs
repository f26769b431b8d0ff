use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::forward::{Contribution, Frame};
use super::{ImageDims, TRANSMITTANCE_MIN};
use crate::error::{Error, Result};
use crate::geometry::{jacobian_unchecked, CameraPose};
use crate::scene::{normalized_quat, quat_to_matrix, GaussianCloud};

/// Gradients of a scalar loss with respect to every Gaussian parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBuffer {
    pub position: Vec<Vector3<f64>>,
    pub log_scale: Vec<Vector3<f64>>,
    /// With respect to the raw (unnormalized) quaternion `(w, x, y, z)`.
    pub rotation: Vec<[f64; 4]>,
    pub opacity_logit: Vec<f64>,
    pub intensity: Vec<f64>,
    /// `‖∂L/∂mean2d‖` with the mean expressed in normalized device
    /// coordinates (pixel gradient scaled by half the image size).
    pub mean2d_grad_norm: Vec<f64>,
    /// 1 for Gaussians that produced a splat in this pass.
    pub hits: Vec<u32>,
}

impl GradientBuffer {
    pub fn zeros(n: usize) -> Self {
        Self {
            position: vec![Vector3::zeros(); n],
            log_scale: vec![Vector3::zeros(); n],
            rotation: vec![[0.0; 4]; n],
            opacity_logit: vec![0.0; n],
            intensity: vec![0.0; n],
            mean2d_grad_norm: vec![0.0; n],
            hits: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    fn check_finite(&self) -> Result<()> {
        for i in 0..self.len() {
            let finite = self.position[i].iter().all(|v| v.is_finite())
                && self.log_scale[i].iter().all(|v| v.is_finite())
                && self.rotation[i].iter().all(|v| v.is_finite())
                && self.opacity_logit[i].is_finite()
                && self.intensity[i].is_finite()
                && self.mean2d_grad_norm[i].is_finite();
            if !finite {
                return Err(Error::NonFiniteGradient { index: i });
            }
        }
        Ok(())
    }
}

/// Gradient with respect to one splat's 2D parameters.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    u: f64,
    v: f64,
    /// Conic entries; `b` is the off-diagonal scalar, appearing twice in the form.
    a: f64,
    b: f64,
    c: f64,
    peak: f64,
    intensity: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.u += o.u;
        self.v += o.v;
        self.a += o.a;
        self.b += o.b;
        self.c += o.c;
        self.peak += o.peak;
        self.intensity += o.intensity;
    }
}

struct Record {
    slot: usize,
    contribution: Contribution,
    t_before: f64,
}

impl Frame {
    fn backward_tile(
        &self,
        tile: usize,
        background: f64,
        d_pixels: &[f64],
        d_opacity: &[f64],
    ) -> Vec<SplatGrad> {
        let packed = self.packed(tile);
        let mut grads = vec![SplatGrad::default(); packed.len()];
        let (x0, x1, y0, y1) = self.tile_bounds(tile);
        let width = self.dims.0;
        let mut records: Vec<Record> = Vec::new();
        for py in y0..y1 {
            for px in x0..x1 {
                let d_pix = d_pixels[py * width + px];
                let d_op = d_opacity[py * width + px];
                if d_pix == 0.0 && d_op == 0.0 {
                    continue;
                }
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);

                records.clear();
                let mut t = 1.0;
                for (slot, s) in packed.iter().enumerate() {
                    let Some(c) = s.evaluate(fx, fy) else {
                        continue;
                    };
                    let next = t * (1.0 - c.alpha);
                    if next < TRANSMITTANCE_MIN {
                        break;
                    }
                    records.push(Record {
                        slot,
                        contribution: c,
                        t_before: t,
                    });
                    t = next;
                }
                let t_final = t;

                // L = d_pix * (C + bg*T_f) + d_op * (1 - T_f)
                // ∂C/∂α_k = c_k T_k - S_k / (1-α_k), S_k = Σ_{m>k} c_m α_m T_m
                // ∂T_f/∂α_k = -T_f / (1-α_k)
                let mut behind = 0.0;
                for r in records.iter().rev() {
                    let s = &packed[r.slot];
                    let c = &r.contribution;
                    let one_minus = 1.0 - c.alpha;
                    let g = &mut grads[r.slot];
                    g.intensity += d_pix * c.alpha * r.t_before;
                    let d_alpha = d_pix
                        * (s.intensity * r.t_before - (behind + background * t_final) / one_minus)
                        + d_op * t_final / one_minus;
                    behind += s.intensity * c.alpha * r.t_before;
                    if c.capped {
                        continue;
                    }
                    g.peak += d_alpha * c.gauss;
                    // α = peak·exp(-q/2)
                    let d_q = -0.5 * d_alpha * s.peak * c.gauss;
                    g.a += d_q * c.dx * c.dx;
                    g.b += d_q * 2.0 * c.dx * c.dy;
                    g.c += d_q * c.dy * c.dy;
                    // dx = px - u
                    g.u -= d_q * 2.0 * (s.a * c.dx + s.b * c.dy);
                    g.v -= d_q * 2.0 * (s.b * c.dx + s.c * c.dy);
                }
            }
        }
        grads
    }

    /// Gradients of `Σ_p d_pixels(p)·pixel(p) + d_opacity(p)·opacity(p)`.
    pub fn backward(
        &self,
        cloud: &GaussianCloud,
        pose: &CameraPose,
        background: f64,
        d_pixels: &[f64],
        d_opacity: &[f64],
    ) -> Result<GradientBuffer> {
        let (w, h) = self.dims;
        if d_pixels.len() != w * h || d_opacity.len() != w * h {
            return Err(Error::DimensionMismatch(format!(
                "gradient images of {} and {} values for a {w}x{h} frame",
                d_pixels.len(),
                d_opacity.len()
            )));
        }
        if cloud.len() != self.n_gaussians {
            return Err(Error::DimensionMismatch(
                "cloud changed since the frame was prepared".into(),
            ));
        }

        let per_tile: Vec<Vec<SplatGrad>> = (0..self.tile_lists.len())
            .into_par_iter()
            .map(|t| self.backward_tile(t, background, d_pixels, d_opacity))
            .collect();
        let mut splat_grads = vec![SplatGrad::default(); self.splats.len()];
        for (tile, grads) in per_tile.iter().enumerate() {
            for (g, &s) in grads.iter().zip(&self.tile_lists[tile]) {
                splat_grads[s as usize].add(g);
            }
        }

        let chained: Vec<ParamGrad> = self
            .splats
            .par_iter()
            .zip(splat_grads.par_iter())
            .map(|(s, g)| chain_to_params(cloud, pose, self.dims, s.gaussian_index, g))
            .collect();

        let mut out = GradientBuffer::zeros(cloud.len());
        for (s, p) in self.splats.iter().zip(chained) {
            let i = s.gaussian_index;
            out.position[i] = p.position;
            out.log_scale[i] = p.log_scale;
            out.rotation[i] = p.rotation;
            out.opacity_logit[i] = p.opacity_logit;
            out.intensity[i] = p.intensity;
            out.mean2d_grad_norm[i] = p.mean2d_norm;
            out.hits[i] = 1;
        }
        out.check_finite()?;
        Ok(out)
    }
}

struct ParamGrad {
    position: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: [f64; 4],
    opacity_logit: f64,
    intensity: f64,
    mean2d_norm: f64,
}

fn chain_to_params(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    dims: ImageDims,
    index: usize,
    g2: &SplatGrad,
) -> ParamGrad {
    let gauss = &cloud.gaussians[index];
    let q = normalized_quat(&gauss.rotation);
    let rot = quat_to_matrix(&q);
    let scale = gauss.scale();
    let m = rot * Matrix3::from_diagonal(&scale);
    let cov3 = m * m.transpose();

    let w = pose.rotation;
    let x_cam = pose.world_to_camera(&gauss.position);
    let (x, y, z) = (x_cam.x, x_cam.y, x_cam.z);
    let j: Matrix2x3<f64> = jacobian_unchecked(pose.fx, pose.fy, &x_cam);
    let t = j * w;
    let cov2 = t * cov3 * t.transpose() + Matrix2::identity() * super::LOW_PASS;
    let conic = cov2.try_inverse().unwrap_or_else(Matrix2::zeros);

    // Conic gradient as a full symmetric matrix, then through the inverse.
    let g_conic = Matrix2::new(g2.a, 0.5 * g2.b, 0.5 * g2.b, g2.c);
    let g_cov2 = -(conic * g_conic * conic);
    let g_cov3 = t.transpose() * g_cov2 * t;
    let g_t = 2.0 * g_cov2 * t * cov3;
    let g_j = g_t * w.transpose();

    let (fx, fy) = (pose.fx, pose.fy);
    let iz2 = 1.0 / (z * z);
    let iz3 = iz2 / z;
    let mut g_cam = Vector3::new(
        g_j[(0, 2)] * (-fx * iz2),
        g_j[(1, 2)] * (-fy * iz2),
        g_j[(0, 0)] * (-fx * iz2)
            + g_j[(0, 2)] * (2.0 * fx * x * iz3)
            + g_j[(1, 1)] * (-fy * iz2)
            + g_j[(1, 2)] * (2.0 * fy * y * iz3),
    );
    g_cam += Vector3::new(
        g2.u * fx / z,
        g2.v * fy / z,
        -(g2.u * fx * x + g2.v * fy * y) * iz2,
    );
    let position = w.transpose() * g_cam;

    // Σ3 = M Mᵀ, M = R S
    let g_m = 2.0 * g_cov3 * m;
    let mut g_rot = g_m;
    for c in 0..3 {
        for r in 0..3 {
            g_rot[(r, c)] *= scale[c];
        }
    }
    let log_scale = Vector3::from_fn(|c, _| {
        (0..3).map(|r| g_m[(r, c)] * rot[(r, c)]).sum::<f64>() * scale[c]
    });
    let rotation = quat_grad(&gauss.rotation, &q, &g_rot);

    let peak = gauss.opacity();
    ParamGrad {
        position,
        log_scale,
        rotation,
        opacity_logit: g2.peak * peak * (1.0 - peak),
        intensity: g2.intensity,
        mean2d_norm: (g2.u * 0.5 * dims.0 as f64).hypot(g2.v * 0.5 * dims.1 as f64),
    }
}

/// Chain `∂L/∂R` through the quaternion-to-matrix map and the normalization.
fn quat_grad(raw: &[f64; 4], q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let gr = |r: usize, c: usize| g[(r, c)];
    let dw = 2.0
        * (-z * gr(0, 1) + y * gr(0, 2) + z * gr(1, 0) - x * gr(1, 2) - y * gr(2, 0)
            + x * gr(2, 1));
    let dx = 2.0
        * (y * gr(0, 1) + z * gr(0, 2) + y * gr(1, 0) - 2.0 * x * gr(1, 1) - w * gr(1, 2)
            + z * gr(2, 0)
            + w * gr(2, 1)
            - 2.0 * x * gr(2, 2));
    let dy = 2.0
        * (-2.0 * y * gr(0, 0) + x * gr(0, 1) + w * gr(0, 2) + x * gr(1, 0) + z * gr(1, 2)
            - w * gr(2, 0)
            + z * gr(2, 1)
            - 2.0 * y * gr(2, 2));
    let dz = 2.0
        * (-2.0 * z * gr(0, 0) - w * gr(0, 1) + x * gr(0, 2) + w * gr(1, 0) - 2.0 * z * gr(1, 1)
            + y * gr(1, 2)
            + x * gr(2, 0)
            + y * gr(2, 1));
    let gq = [dw, dx, dy, dz];
    let norm = raw.iter().map(|c| c * c).sum::<f64>().sqrt();
    let dot: f64 = gq.iter().zip(q).map(|(a, b)| a * b).sum();
    [0, 1, 2, 3].map(|k| (gq[k] - q[k] * dot) / norm)
}

/// Backward pass of [`super::render`].
pub fn render_backward(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    dims: ImageDims,
    background: f64,
    d_pixels: &[f64],
    d_opacity: &[f64],
) -> Result<GradientBuffer> {
    Frame::prepare(cloud, pose, dims).backward(cloud, pose, background, d_pixels, d_opacity)
}
