//! Image losses and their pixel gradients.
//!
//! The training objective is
//! `λ₁·L1 + λ_dssim·D-SSIM + λ_beta·L_beta + λ_tv·L_TV`.
//! `L_beta` acts on the rendered opacity map, the rest on pixel values.

pub(crate) mod ssim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ProjectionImage;

pub use ssim::{C1, C2, SIGMA as SSIM_SIGMA, WINDOW as SSIM_WINDOW};

/// Clamp applied to the opacity map before the Beta log terms.
pub const BETA_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_l1: f64,
    pub lambda_dssim: f64,
    pub lambda_beta: f64,
    pub lambda_tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_l1: 0.8,
            lambda_dssim: 0.2,
            lambda_beta: 1e-3,
            lambda_tv: 1e-4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_l1, self.lambda_dssim, self.lambda_beta, self.lambda_tv];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("loss weights must be finite and non-negative"));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::invalid("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub tv: f64,
    pub beta: f64,
    pub d_pixels: Vec<f64>,
    pub d_opacity: Vec<f64>,
}

/// Mean absolute error; gradient `sign(r - t) / P` with `sign(0) = 0`.
pub fn l1_loss(rendered: &ProjectionImage, target: &ProjectionImage) -> Result<(f64, Vec<f64>)> {
    rendered.check_same_dims(target)?;
    let inv_p = 1.0 / rendered.len() as f64;
    let mut sum = 0.0;
    let grad = rendered
        .pixels
        .iter()
        .zip(&target.pixels)
        .map(|(r, t)| {
            let d = r - t;
            sum += d.abs();
            if d > 0.0 {
                inv_p
            } else if d < 0.0 {
                -inv_p
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum * inv_p, grad))
}

/// Structural dissimilarity `(1 - SSIM) / 2`.
pub fn dssim_loss(rendered: &ProjectionImage, target: &ProjectionImage) -> Result<(f64, Vec<f64>)> {
    rendered.check_same_dims(target)?;
    let (s, grad) = ssim::ssim_with_grad(
        &rendered.pixels,
        &target.pixels,
        rendered.width,
        rendered.height,
        true,
    )?;
    let grad = grad.unwrap_or_default().into_iter().map(|g| -0.5 * g).collect();
    Ok(((1.0 - s) / 2.0, grad))
}

/// Anisotropic total variation: sum of absolute differences between
/// vertically and horizontally adjacent pixels. Pairs that would reach past
/// the image border are skipped. Unweighted; the weight lives in
/// [`total_loss`].
pub fn tv_loss(rendered: &ProjectionImage) -> Result<(f64, Vec<f64>)> {
    let (w, h) = (rendered.width, rendered.height);
    if w < 2 || h < 2 {
        return Err(Error::invalid(format!("TV needs at least 2x2 pixels, got {w}x{h}")));
    }
    let p = &rendered.pixels;
    let mut grad = vec![0.0; w * h];
    let mut sum = 0.0;
    let mut pair = |a: usize, b: usize, grad: &mut [f64]| {
        let d = p[b] - p[a];
        sum += d.abs();
        let s = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        grad[b] += s;
        grad[a] -= s;
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if y + 1 < h {
                pair(i, i + w, &mut grad);
            }
            if x + 1 < w {
                pair(i, i + 1, &mut grad);
            }
        }
    }
    Ok((sum, grad))
}

/// `(1/P) Σ [ln Î + ln(1 - Î)]` over the opacity map, `Î = clamp(I, ε, 1-ε)`.
pub fn beta_loss(opacity: Option<&[f64]>) -> Result<(f64, Vec<f64>)> {
    let opacity = opacity.ok_or_else(|| Error::invalid("beta loss needs an opacity map"))?;
    if opacity.is_empty() {
        return Err(Error::invalid("empty opacity map"));
    }
    let inv_p = 1.0 / opacity.len() as f64;
    let mut sum = 0.0;
    let grad = opacity
        .iter()
        .map(|&a| {
            let c = a.clamp(BETA_EPS, 1.0 - BETA_EPS);
            sum += c.ln() + (1.0 - c).ln();
            if a < BETA_EPS || a > 1.0 - BETA_EPS {
                0.0
            } else {
                (1.0 / c - 1.0 / (1.0 - c)) * inv_p
            }
        })
        .collect();
    Ok((sum * inv_p, grad))
}

/// The weighted objective with combined pixel and opacity-map gradients.
pub fn total_loss(
    rendered: &ProjectionImage,
    target: &ProjectionImage,
    weights: &LossWeights,
) -> Result<LossReport> {
    weights.validate()?;
    let (l1, g_l1) = l1_loss(rendered, target)?;
    let (dssim, g_dssim) = dssim_loss(rendered, target)?;
    let (tv, g_tv) = tv_loss(rendered)?;
    let (beta, g_beta) = match (&rendered.opacity, weights.lambda_beta > 0.0) {
        (Some(op), _) => beta_loss(Some(op))?,
        (None, true) => return Err(Error::invalid("beta loss needs an opacity map")),
        (None, false) => (0.0, vec![0.0; rendered.len()]),
    };
    let w = weights;
    let total = w.lambda_l1 * l1 + w.lambda_dssim * dssim + w.lambda_beta * beta + w.lambda_tv * tv;
    let d_pixels = (0..rendered.len())
        .map(|p| w.lambda_l1 * g_l1[p] + w.lambda_dssim * g_dssim[p] + w.lambda_tv * g_tv[p])
        .collect();
    let d_opacity = g_beta.iter().map(|g| w.lambda_beta * g).collect();
    Ok(LossReport {
        total,
        l1,
        dssim,
        tv,
        beta,
        d_pixels,
        d_opacity,
    })
}
