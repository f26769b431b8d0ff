//! Windowed SSIM with its analytic gradient.
//!
//! 11x11 Gaussian window (σ = 1.5), `C1 = (0.01 L)²`, `C2 = (0.03 L)²` with
//! `L = 1`. Only windows lying fully inside the image are averaged ("valid"
//! windows), so images must be at least 11x11.

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn window_weights() -> [f64; WINDOW] {
    let half = (WINDOW / 2) as f64;
    let mut w = [0.0; WINDOW];
    for (k, v) in w.iter_mut().enumerate() {
        let d = k as f64 - half;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.map(|v| v / sum)
}

/// Valid separable correlation: `(w, h)` → `(w - 10, h - 10)`.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (j, kj) in k.iter().enumerate() {
                acc += kj * rows[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: `(w - 10, h - 10)` → `(w, h)`.
fn filter_valid_adjoint(src: &[f64], w: usize, h: usize, k: &[f64; WINDOW]) -> Vec<f64> {
    let ow = w + 1 - WINDOW;
    let oh = h + 1 - WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for (j, kj) in k.iter().enumerate() {
                rows[(y + j) * ow + x] += kj * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (i, ki) in k.iter().enumerate() {
                out[y * w + x + i] += ki * v;
            }
        }
    }
    out
}

pub(crate) fn check_dims(w: usize, h: usize) -> Result<()> {
    if w < WINDOW || h < WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs images of at least {WINDOW}x{WINDOW}, got {w}x{h}"
        )));
    }
    Ok(())
}

/// Mean SSIM of `x` against `y`, and optionally its gradient with respect to `x`.
pub(crate) fn ssim_with_grad(
    x: &[f64],
    y: &[f64],
    w: usize,
    h: usize,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check_dims(w, h)?;
    if x.len() != w * h || y.len() != w * h {
        return Err(Error::DimensionMismatch(format!(
            "SSIM inputs of {} and {} values for {w}x{h}",
            x.len(),
            y.len()
        )));
    }
    let k = window_weights();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, w, h, &k);
    let mu_y = filter_valid(y, w, h, &k);
    let e_xx = filter_valid(&xx, w, h, &k);
    let e_yy = filter_valid(&yy, w, h, &k);
    let e_xy = filter_valid(&xy, w, h, &k);

    let n = mu_x.len();
    let mut total = 0.0;
    let (mut d_mu, mut d_exx, mut d_exy) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let var_x = e_xx[i] - mx * mx;
        let var_y = e_yy[i] - my * my;
        let cov = e_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + C1;
        let a2 = 2.0 * cov + C2;
        let b1 = mx * mx + my * my + C1;
        let b2 = var_x + var_y + C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            let beta = -s / b2;
            let gamma = 2.0 * a1 / (b1 * b2);
            let direct = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
            d_mu[i] = direct - 2.0 * mx * beta - my * gamma;
            d_exx[i] = beta;
            d_exy[i] = gamma;
        }
    }
    let mean = total / n as f64;
    if !want_grad {
        return Ok((mean, None));
    }
    let inv_n = 1.0 / n as f64;
    let g_mu = filter_valid_adjoint(&d_mu, w, h, &k);
    let g_xx = filter_valid_adjoint(&d_exx, w, h, &k);
    let g_xy = filter_valid_adjoint(&d_exy, w, h, &k);
    let grad = (0..w * h)
        .map(|p| inv_n * (g_mu[p] + 2.0 * x[p] * g_xx[p] + y[p] * g_xy[p]))
        .collect();
    Ok((mean, Some(grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one_and_are_symmetric() {
        let k = window_weights();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..WINDOW {
            assert_eq!(k[i], k[WINDOW - 1 - i]);
        }
    }

    #[test]
    fn adjoint_identity() {
        // <F a, b> = <a, Fᵀ b>
        let (w, h) = (17, 13);
        let k = window_weights();
        let a: Vec<f64> = (0..w * h).map(|i| ((i * 37) % 11) as f64 / 7.0).collect();
        let b: Vec<f64> = (0..(w - 10) * (h - 10)).map(|i| ((i * 5) % 3) as f64 - 1.0).collect();
        let fa = filter_valid(&a, w, h, &k);
        let ftb = filter_valid_adjoint(&b, w, h, &k);
        let lhs: f64 = fa.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&ftb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn constant_images_pin_the_luminance_term() {
        let (w, h) = (12, 12);
        let (s, _) = ssim_with_grad(&vec![0.0; w * h], &vec![1.0; w * h], w, h, false).unwrap();
        assert!((s - C1 / (1.0 + C1)).abs() < 1e-12);
    }
}
