//! Held-out view scoring (PSNR, SSIM) and the reduced-views sweep.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ProjectionImage;
use crate::io::ply::native_size;
use crate::io::Dataset;
use crate::losses::ssim::ssim_with_grad;
use crate::rasterizer::render;
use crate::scene::GaussianCloud;
use crate::trainer::{initial_cloud, train_from, TrainConfig, TrainOutcome};

/// PSNR in dB for images with peak 1. Identical images give `+inf`.
pub fn psnr(a: &ProjectionImage, b: &ProjectionImage) -> Result<f64> {
    a.check_same_dims(b)?;
    let sse: f64 = a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = sse / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean SSIM, sharing the kernel and constants of the D-SSIM loss.
pub fn ssim(a: &ProjectionImage, b: &ProjectionImage) -> Result<f64> {
    a.check_same_dims(b)?;
    Ok(ssim_with_grad(&a.pixels, &b.pixels, a.width, a.height, false)?.0)
}

/// Formats a metric, writing infinities as `inf`.
pub fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub view_index: usize,
    pub angle_deg: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub psnr_mean: f64,
    /// Sample (n - 1) standard deviation; 0 for a single row.
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub train_fraction: f64,
    pub n_gaussians: usize,
    /// Size of the native PLY encoding of the model.
    pub model_bytes: u64,
    /// Dense float32 voxel footprint of the source phantom, when known.
    pub voxel_bytes: Option<u64>,
}

/// Mean and sample standard deviation. Infinite entries make the mean
/// infinite; the spread is 0 if every entry is the same infinity.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    if values.iter().any(|v| v.is_infinite()) {
        let first = values[0];
        let std = if values.iter().all(|v| *v == first) { 0.0 } else { f64::INFINITY };
        let mean = values.iter().sum::<f64>();
        return (if mean.is_nan() { f64::NAN } else { mean.signum() * f64::INFINITY }, std);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_rows(
        rows: Vec<EvalRow>,
        train_fraction: f64,
        cloud: &GaussianCloud,
        voxel_bytes: Option<u64>,
    ) -> Self {
        let p: Vec<f64> = rows.iter().map(|r| r.psnr).collect();
        let s: Vec<f64> = rows.iter().map(|r| r.ssim).collect();
        let (psnr_mean, psnr_std) = mean_std(&p);
        let (ssim_mean, ssim_std) = mean_std(&s);
        Self {
            rows,
            psnr_mean,
            psnr_std,
            ssim_mean,
            ssim_std,
            train_fraction,
            n_gaussians: cloud.len(),
            model_bytes: native_size(cloud) as u64,
            voxel_bytes,
        }
    }

    /// Model bytes over dense voxel bytes.
    pub fn footprint_ratio(&self) -> Option<f64> {
        self.voxel_bytes.map(|v| self.model_bytes as f64 / v as f64)
    }

    pub const ROWS_HEADER: &'static str = "view,angle_deg,psnr,ssim";

    pub fn rows_csv(&self) -> String {
        let mut out = String::from(Self::ROWS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.view_index,
                r.angle_deg,
                format_metric(r.psnr),
                format_metric(r.ssim)
            );
        }
        out
    }

    pub const SUMMARY_HEADER: &'static str = "train_fraction,n_test_views,n_gaussians,psnr_mean,psnr_std,ssim_mean,ssim_std,model_bytes,voxel_bytes,model_to_voxel";

    pub fn summary_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.train_fraction,
            self.rows.len(),
            self.n_gaussians,
            format_metric(self.psnr_mean),
            format_metric(self.psnr_std),
            format_metric(self.ssim_mean),
            format_metric(self.ssim_std),
            self.model_bytes,
            self.voxel_bytes.map(|v| v.to_string()).unwrap_or_default(),
            self.footprint_ratio().map(|r| format!("{r}")).unwrap_or_default(),
        )
    }
}

/// Renders every view in `test_indices` and scores it against the dataset.
/// Renders are clamped to `[0, 1]` before scoring.
pub fn evaluate(
    cloud: &GaussianCloud,
    dataset: &Dataset,
    test_indices: &[usize],
    train_fraction: f64,
) -> Result<EvalReport> {
    if test_indices.is_empty() {
        return Err(Error::invalid("evaluation needs at least one held-out view"));
    }
    if let Some(bad) = test_indices.iter().find(|k| **k >= dataset.len()) {
        return Err(Error::invalid(format!(
            "view index {bad} out of range for {} views",
            dataset.len()
        )));
    }
    let dims = dataset.image_dims();
    let rows = test_indices
        .par_iter()
        .map(|&k| {
            let mut img = render(cloud, &dataset.poses[k], dims, 0.0)?;
            img.pixels.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
            let target = &dataset.images[k];
            Ok(EvalRow {
                view_index: k,
                angle_deg: target.view_angle_deg,
                psnr: psnr(&img, target)?,
                ssim: ssim(&img, target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let voxel_bytes = dataset.manifest.phantom.as_ref().map(|p| p.dense_bytes());
    Ok(EvalReport::from_rows(rows, train_fraction, cloud, voxel_bytes))
}

/// Trains one model per fraction, each from the same initialization and
/// seed, and scores it on its own held-out views.
pub fn sweep_fractions(dataset: &Dataset, fractions: &[f64], config: &TrainConfig) -> Result<Vec<EvalReport>> {
    sweep_fractions_with(dataset, fractions, config, |_, _| Ok(()))
}

/// [`sweep_fractions`], handing each trained model to `on_model` before it
/// is scored.
pub fn sweep_fractions_with<F>(
    dataset: &Dataset,
    fractions: &[f64],
    config: &TrainConfig,
    mut on_model: F,
) -> Result<Vec<EvalReport>>
where
    F: FnMut(f64, &TrainOutcome) -> Result<()>,
{
    if fractions.is_empty() {
        return Err(Error::invalid("no fractions given"));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::invalid(format!("fraction {f} outside (0, 1]")));
    }
    let init = initial_cloud(dataset, config)?;
    let mut reports = Vec::with_capacity(fractions.len());
    for &f in fractions {
        let cfg = TrainConfig {
            train_fraction: f,
            ..config.clone()
        };
        let out = train_from(dataset, &cfg, init.clone(), |_, _, _| Ok(()))?;
        on_model(f, &out)?;
        reports.push(evaluate(&out.cloud, dataset, &out.test_indices, f)?);
    }
    Ok(reports)
}

pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EvalReport::SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.summary_csv_line());
        out.push('\n');
    }
    out
}

pub fn write_csv(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pm(mean: f64, std: f64, digits: usize) -> String {
    if mean.is_infinite() {
        return "inf".to_string();
    }
    format!("{mean:.digits$} ± {std:.digits$}")
}

/// Human-readable table, one column per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut cols: Vec<[String; 5]> = vec![[
        "".into(),
        "PSNR (dB, mean ± sd)".into(),
        "SSIM (mean ± sd)".into(),
        "Gaussians".into(),
        "model / voxel bytes".into(),
    ]];
    for r in reports {
        cols.push([
            format!("{:.0}% of views", r.train_fraction * 100.0),
            pm(r.psnr_mean, r.psnr_std, 2),
            pm(r.ssim_mean, r.ssim_std, 4),
            r.n_gaussians.to_string(),
            match r.voxel_bytes {
                Some(v) => format!("{} / {} ({:.1}%)", r.model_bytes, v, 100.0 * r.footprint_ratio().unwrap_or(0.0)),
                None => format!("{} / n/a", r.model_bytes),
            },
        ]);
    }
    let widths: Vec<usize> = cols
        .iter()
        .map(|c| c.iter().map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for line in 0..5 {
        for (c, w) in cols.iter().zip(&widths) {
            let cell = &c[line];
            let pad = w - cell.chars().count();
            let _ = write!(out, "{cell}{}  ", " ".repeat(pad));
        }
        let trimmed = out.trim_end().len();
        out.truncate(trimmed);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(px: Vec<f64>, w: usize) -> ProjectionImage {
        let h = px.len() / w;
        ProjectionImage::new(w, h, px, 0.0).unwrap()
    }

    #[test]
    fn psnr_reference_values() {
        let a = img(vec![0.5; 16], 4);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = img(vec![0.6; 16], 4);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = img(vec![0.51; 16], 4);
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
        assert_eq!(format_metric(f64::INFINITY), "inf");
    }

    #[test]
    fn ssim_constant_images() {
        let zero = img(vec![0.0; 144], 12);
        let one = img(vec![1.0; 144], 12);
        assert_eq!(ssim(&zero, &zero).unwrap(), 1.0);
        let v = ssim(&zero, &one).unwrap();
        assert!((v - C1_RATIO).abs() < 1e-12, "{v}");
        assert!(ssim(&img(vec![0.0; 100], 10), &img(vec![0.0; 100], 10)).is_err());
    }

    const C1_RATIO: f64 = 1e-4 / (1.0 + 1e-4);

    #[test]
    fn mean_std_sample_convention() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[7.0]), (7.0, 0.0));
        assert_eq!(mean_std(&[f64::INFINITY, f64::INFINITY]), (f64::INFINITY, 0.0));
    }
}
