use rayon::prelude::*;

use super::project::project_gaussians;
use super::{
    ImageDims, SplatProjection, ALPHA_MAX, ALPHA_MIN, SUPPORT_MAHALANOBIS_SQ, TILE_SIZE,
    TRANSMITTANCE_MIN,
};
use crate::error::Result;
use crate::geometry::CameraPose;
use crate::image::ProjectionImage;
use crate::scene::GaussianCloud;

/// Splat data packed for the per-pixel loop.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Packed {
    pub u: f64,
    pub v: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub peak: f64,
    pub intensity: f64,
}

/// Per-pixel contribution of one splat, `None` when skipped.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Contribution {
    pub alpha: f64,
    pub gauss: f64,
    pub dx: f64,
    pub dy: f64,
    pub capped: bool,
}

impl Packed {
    #[inline(always)]
    pub fn evaluate(&self, px: f64, py: f64) -> Option<Contribution> {
        let dx = px - self.u;
        let dy = py - self.v;
        let q = self.a * dx * dx + 2.0 * self.b * dx * dy + self.c * dy * dy;
        if q > SUPPORT_MAHALANOBIS_SQ {
            return None;
        }
        let gauss = (-0.5 * q).exp();
        let raw = self.peak * gauss;
        if raw < ALPHA_MIN {
            return None;
        }
        let capped = raw > ALPHA_MAX;
        Some(Contribution {
            alpha: if capped { ALPHA_MAX } else { raw },
            gauss,
            dx,
            dy,
            capped,
        })
    }
}

/// A cloud projected and binned for one pose; shared by forward and backward.
pub struct Frame {
    pub(crate) dims: ImageDims,
    pub(crate) tiles_x: usize,
    pub(crate) splats: Vec<SplatProjection>,
    /// Per tile: indices into `splats`, sorted by `(depth, gaussian_index)`.
    pub(crate) tile_lists: Vec<Vec<u32>>,
    pub(crate) n_gaussians: usize,
}

pub(crate) struct TileOutput {
    pub color: Vec<f64>,
    pub transmittance: Vec<f64>,
}

impl Frame {
    pub fn prepare(cloud: &GaussianCloud, pose: &CameraPose, dims: ImageDims) -> Self {
        let splats = project_gaussians(cloud, pose, dims);
        let tiles_x = dims.0.div_ceil(TILE_SIZE);
        let tiles_y = dims.1.div_ceil(TILE_SIZE);

        let mut order: Vec<u32> = (0..splats.len() as u32).collect();
        order.sort_unstable_by(|&i, &j| {
            let (si, sj) = (&splats[i as usize], &splats[j as usize]);
            si.depth
                .total_cmp(&sj.depth)
                .then(si.gaussian_index.cmp(&sj.gaussian_index))
        });
        let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
        for &s in &order {
            let span = splats[s as usize].tile_span;
            for ty in span.y0..=span.y1 {
                for tx in span.x0..=span.x1 {
                    tile_lists[ty * tiles_x + tx].push(s);
                }
            }
        }
        Self {
            dims,
            tiles_x,
            splats,
            tile_lists,
            n_gaussians: cloud.len(),
        }
    }

    pub fn splats(&self) -> &[SplatProjection] {
        &self.splats
    }

    pub(crate) fn packed(&self, tile: usize) -> Vec<Packed> {
        self.tile_lists[tile]
            .iter()
            .map(|&s| {
                let s = &self.splats[s as usize];
                Packed {
                    u: s.mean2d.x,
                    v: s.mean2d.y,
                    a: s.conic[0],
                    b: s.conic[1],
                    c: s.conic[2],
                    peak: s.alpha_peak,
                    intensity: s.intensity,
                }
            })
            .collect()
    }

    /// Pixel bounds `(x0, x1, y0, y1)` (exclusive ends) of a tile.
    pub(crate) fn tile_bounds(&self, tile: usize) -> (usize, usize, usize, usize) {
        let tx = tile % self.tiles_x;
        let ty = tile / self.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (
            x0,
            (x0 + TILE_SIZE).min(self.dims.0),
            y0,
            (y0 + TILE_SIZE).min(self.dims.1),
        )
    }

    fn render_tile(&self, tile: usize) -> TileOutput {
        let packed = self.packed(tile);
        let (x0, x1, y0, y1) = self.tile_bounds(tile);
        let n = (x1 - x0) * (y1 - y0);
        let mut color = Vec::with_capacity(n);
        let mut transmittance = Vec::with_capacity(n);
        for py in y0..y1 {
            for px in x0..x1 {
                let (c, t) = composite(&packed, px as f64 + 0.5, py as f64 + 0.5);
                color.push(c);
                transmittance.push(t);
            }
        }
        TileOutput {
            color,
            transmittance,
        }
    }

    /// Composites the frame. Pixel values are unclamped.
    pub fn render(&self, background: f64) -> ProjectionImage {
        let (w, h) = self.dims;
        let outputs: Vec<TileOutput> = (0..self.tile_lists.len())
            .into_par_iter()
            .map(|t| self.render_tile(t))
            .collect();
        let mut pixels = vec![0.0; w * h];
        let mut opacity = vec![0.0; w * h];
        for (tile, out) in outputs.iter().enumerate() {
            let (x0, x1, y0, y1) = self.tile_bounds(tile);
            let tw = x1 - x0;
            for py in y0..y1 {
                for px in x0..x1 {
                    let k = (py - y0) * tw + (px - x0);
                    let t = out.transmittance[k];
                    pixels[py * w + px] = out.color[k] + background * t;
                    opacity[py * w + px] = 1.0 - t;
                }
            }
        }
        ProjectionImage {
            width: w,
            height: h,
            pixels,
            view_angle_deg: 0.0,
            opacity: Some(opacity),
        }
    }
}

/// Front-to-back compositing of one pixel: `(color, final transmittance)`.
#[inline]
pub(crate) fn composite(packed: &[Packed], px: f64, py: f64) -> (f64, f64) {
    let mut t = 1.0;
    let mut color = 0.0;
    for s in packed {
        let Some(c) = s.evaluate(px, py) else {
            continue;
        };
        let next = t * (1.0 - c.alpha);
        if next < TRANSMITTANCE_MIN {
            break;
        }
        color += s.intensity * c.alpha * t;
        t = next;
    }
    (color, t)
}

/// Renders the cloud. The returned image carries the opacity map
/// `1 - T_final`; pixel values are unclamped (clamp only for output).
pub fn render(
    cloud: &GaussianCloud,
    pose: &CameraPose,
    dims: ImageDims,
    background: f64,
) -> Result<ProjectionImage> {
    let mut img = Frame::prepare(cloud, pose, dims).render(background);
    img.view_angle_deg = pose.view_angle_deg;
    Ok(img)
}
