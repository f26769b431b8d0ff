//! The optimization loop: sample a view, render, score, backpropagate, step
//! Adam, and periodically densify and prune.

pub mod adam;
pub mod density;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamState, GroupRates};
pub use density::{densify_and_prune, reset_opacity, DensityStats};

use crate::error::{Error, Result};
use crate::io::{write_ply, Dataset, PlyLayout};
use crate::losses::{total_loss, LossWeights};
use crate::rasterizer::Frame;
use crate::scene::{init_ellipsoid_cloud, Ellipsoid, GaussianCloud};

/// Per-group learning rates. The position rate is relative to the scene
/// extent and decays exponentially from `position_init` to
/// `position_final` over the run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub position_init: f64,
    pub position_final: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub intensity: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position_init: 1.6e-4,
            position_final: 1.6e-6,
            log_scale: 5e-3,
            rotation: 1e-3,
            opacity_logit: 5e-2,
            intensity: 2.5e-3,
        }
    }
}

impl LearningRates {
    pub fn all(rate: f64) -> Self {
        Self {
            position_init: rate,
            position_final: rate,
            log_scale: rate,
            rotation: rate,
            opacity_logit: rate,
            intensity: rate,
        }
    }

    /// Rates for `iteration` (1-based) of `total`.
    pub fn at(&self, iteration: usize, total: usize, scene_extent: f64) -> GroupRates {
        let position = if self.position_init == 0.0 || self.position_final == 0.0 {
            self.position_init * (1.0 - progress(iteration, total)) + self.position_final * progress(iteration, total)
        } else {
            let r = progress(iteration, total);
            (self.position_init.ln() * (1.0 - r) + self.position_final.ln() * r).exp()
        };
        GroupRates {
            position: position * scene_extent,
            log_scale: self.log_scale,
            rotation: self.rotation,
            opacity_logit: self.opacity_logit,
            intensity: self.intensity,
        }
    }

    fn validate(&self) -> Result<()> {
        let all = [
            self.position_init,
            self.position_final,
            self.log_scale,
            self.rotation,
            self.opacity_logit,
            self.intensity,
        ];
        if all.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::invalid(format!("learning rates must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

fn progress(iteration: usize, total: usize) -> f64 {
    if total <= 1 {
        0.0
    } else {
        (iteration - 1) as f64 / (total - 1) as f64
    }
}

/// Initial cloud: uniform samples inside the brain prior ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub n_gaussians: usize,
    pub base_opacity: f64,
    pub base_intensity: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 4000,
            base_opacity: 0.1,
            base_intensity: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub weights: LossWeights,
    pub learning_rates: LearningRates,
    pub init: InitConfig,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub prune_opacity_threshold: f64,
    pub opacity_reset_interval: usize,
    pub opacity_reset_value: f64,
    pub split_scale_factor: f64,
    /// Clone instead of split when the largest scale is at most this
    /// fraction of the scene extent.
    pub percent_dense: f64,
    pub max_gaussians: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// 0 disables checkpoints.
    pub checkpoint_interval: usize,
    pub background: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 20000,
            weights: LossWeights::default(),
            learning_rates: LearningRates::default(),
            init: InitConfig::default(),
            densify_from: 500,
            densify_until: 15000,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            prune_opacity_threshold: 0.005,
            opacity_reset_interval: 3000,
            opacity_reset_value: 0.01,
            split_scale_factor: 1.6,
            percent_dense: 0.01,
            max_gaussians: 200_000,
            train_fraction: 0.5,
            seed: 0,
            checkpoint_interval: 5000,
            background: 0.0,
        }
    }
}

impl TrainConfig {
    /// Short schedule for small scans (64×64 views, a few thousand
    /// Gaussians) that finishes in minutes on one core.
    ///
    /// The default growth threshold is tuned for long runs on large images;
    /// on short runs the cloud keeps doubling while the loss is still
    /// falling, so densification here is stricter and stops earlier.
    pub fn quick() -> Self {
        Self {
            iterations: 5000,
            densify_until: 3500,
            densify_grad_threshold: 1e-3,
            checkpoint_interval: 0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be at least 1"));
        }
        self.weights.validate()?;
        self.learning_rates.validate()?;
        let positive = [
            ("densify_grad_threshold", self.densify_grad_threshold),
            ("prune_opacity_threshold", self.prune_opacity_threshold),
            ("opacity_reset_value", self.opacity_reset_value),
            ("percent_dense", self.percent_dense),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.opacity_reset_value < 1.0) {
            return Err(Error::invalid("opacity_reset_value must be below 1"));
        }
        if !(self.split_scale_factor.is_finite() && self.split_scale_factor > 1.0) {
            return Err(Error::invalid(format!(
                "split_scale_factor must exceed 1, got {}",
                self.split_scale_factor
            )));
        }
        if self.densify_interval == 0 || self.opacity_reset_interval == 0 {
            return Err(Error::invalid("densify and opacity reset intervals must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if !self.background.is_finite() {
            return Err(Error::invalid("background must be finite"));
        }
        Ok(())
    }
}

/// Deterministic train/test split of `n_views` views.
///
/// Fraction 0.5 interleaves (even indices train). Any other fraction takes
/// `round(fraction * n)` evenly strided views.
pub fn split_views(n_views: usize, train_fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "train fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let mut is_train = vec![false; n_views];
    if train_fraction == 0.5 {
        for k in (0..n_views).step_by(2) {
            is_train[k] = true;
        }
    } else {
        let m = (train_fraction * n_views as f64).round() as usize;
        for k in 0..m {
            is_train[k * n_views / m] = true;
        }
    }
    let train: Vec<usize> = (0..n_views).filter(|k| is_train[*k]).collect();
    if train.is_empty() {
        return Err(Error::invalid(format!(
            "train fraction {train_fraction} of {n_views} views selects no training view"
        )));
    }
    let test = (0..n_views).filter(|k| !is_train[*k]).collect();
    Ok((train, test))
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub l1: f64,
    pub dssim: f64,
    pub tv: f64,
    pub beta: f64,
    pub total: f64,
    pub n_gaussians: usize,
    pub ms_per_iter: f64,
}

pub const LOG_HEADER: &str = "iteration,l1,dssim,tv,beta,total,n_gaussians,ms_per_iter";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.iteration, self.l1, self.dssim, self.tv, self.beta, self.total, self.n_gaussians, self.ms_per_iter
        )
    }
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(LOG_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub cloud: GaussianCloud,
    pub log: Vec<LogRow>,
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// The initial cloud for a dataset, from the brain prior of its field of view.
pub fn initial_cloud(dataset: &Dataset, config: &TrainConfig) -> Result<GaussianCloud> {
    let ell = Ellipsoid::brain_prior(dataset.manifest.scan().fov_side);
    init_ellipsoid_cloud(
        &ell,
        config.init.n_gaussians,
        config.seed,
        config.init.base_intensity,
        config.init.base_opacity,
    )
}

/// Trains from the default initialization.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let init = initial_cloud(dataset, config)?;
    train_from(dataset, config, init, |_, _, _| Ok(()))
}

/// Trains from `cloud`, calling `observer` after every iteration with the
/// iteration number, the current cloud and its log row.
pub fn train_from<F>(dataset: &Dataset, config: &TrainConfig, mut cloud: GaussianCloud, mut observer: F) -> Result<TrainOutcome>
where
    F: FnMut(usize, &GaussianCloud, &LogRow) -> Result<()>,
{
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("dataset has no views"));
    }
    let (train_indices, test_indices) = split_views(dataset.len(), config.train_fraction)?;
    let dims = dataset.image_dims();

    let mut adam = AdamState::new(cloud.len());
    let mut stats = DensityStats::new(cloud.len());
    let mut view_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut density_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(config.iterations);

    for it in 1..=config.iterations {
        let start = Instant::now();
        if order.is_empty() {
            order = train_indices.clone();
            order.shuffle(&mut view_rng);
            order.reverse();
        }
        let view = order.pop().expect("non-empty epoch");
        let pose = &dataset.poses[view];
        let target = &dataset.images[view];

        let frame = Frame::prepare(&cloud, pose, dims);
        let rendered = frame.render(config.background);
        let report = total_loss(&rendered, target, &config.weights)?;
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        let grads = frame.backward(&cloud, pose, config.background, &report.d_pixels, &report.d_opacity)?;

        let rates = config.learning_rates.at(it, config.iterations, cloud.scene_extent);
        adam.step(&mut cloud, &grads, &rates);

        if it <= config.densify_until {
            stats.accumulate(&grads);
            if it > config.densify_from && it % config.densify_interval == 0 {
                densify_and_prune(&mut cloud, &mut stats, &mut adam, config, it, &mut density_rng)?;
            }
            if it % config.opacity_reset_interval == 0 {
                reset_opacity(&mut cloud, &mut adam, config.opacity_reset_value);
            }
        }
        assert_eq!(adam.len(), cloud.len(), "optimizer state out of step with the cloud");

        let row = LogRow {
            iteration: it,
            l1: report.l1,
            dssim: report.dssim,
            tv: report.tv,
            beta: report.beta,
            total: report.total,
            n_gaussians: cloud.len(),
            ms_per_iter: start.elapsed().as_secs_f64() * 1e3,
        };
        observer(it, &cloud, &row)?;
        log.push(row);
    }

    Ok(TrainOutcome {
        cloud,
        log,
        train_indices,
        test_indices,
    })
}

pub const MODEL_FILE: &str = "model.ply";
pub const LOG_FILE: &str = "train_log.csv";

pub fn checkpoint_file_name(iteration: usize) -> String {
    format!("checkpoint_{iteration:06}.ply")
}

/// Trains and persists `model.ply`, `train_log.csv` and periodic
/// checkpoints under `out_dir`.
pub fn train_to_dir(
    dataset: &Dataset,
    config: &TrainConfig,
    init: GaussianCloud,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let interval = config.checkpoint_interval;
    let outcome = train_from(dataset, config, init, |it, cloud, _| {
        if interval > 0 && it % interval == 0 && it != config.iterations {
            write_ply(cloud, &out_dir.join(checkpoint_file_name(it)), PlyLayout::Native)?;
        }
        Ok(())
    })?;
    write_ply(&outcome.cloud, &out_dir.join(MODEL_FILE), PlyLayout::Native)?;
    write_log(&outcome.log, &out_dir.join(LOG_FILE))?;
    Ok(outcome)
}
