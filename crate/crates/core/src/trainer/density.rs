//! Adaptive density control: clone, split, prune, opacity reset.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adam::{AdamState, OPACITY_SLOT};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::rasterizer::GradientBuffer;
use crate::scene::{logit, GaussianCloud};

/// Screen-space gradient statistics accumulated between densification steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityStats {
    pub grad_sum: Vec<f64>,
    pub hits: Vec<u32>,
    /// Sum of position gradients, used to orient clones.
    pub position_grad: Vec<Vector3<f64>>,
}

impl DensityStats {
    pub fn new(n: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n],
            hits: vec![0; n],
            position_grad: vec![Vector3::zeros(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    pub fn accumulate(&mut self, grads: &GradientBuffer) {
        for i in 0..self.len() {
            if grads.hits[i] > 0 {
                self.grad_sum[i] += grads.mean2d_grad_norm[i];
                self.hits[i] += grads.hits[i];
                self.position_grad[i] += grads.position[i];
            }
        }
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.hits[i] == 0 {
            0.0
        } else {
            self.grad_sum[i] / self.hits[i] as f64
        }
    }
}

/// Clone or split high-gradient Gaussians, then prune transparent ones.
///
/// Returns the number of Gaussians cloned, split and pruned.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &mut DensityStats,
    adam: &mut AdamState,
    config: &TrainConfig,
    iteration: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize, usize)> {
    let n = cloud.len();
    let clone_limit = config.percent_dense * cloud.scene_extent;
    let mut keep = vec![true; n];
    let mut born = Vec::new();
    let (mut cloned, mut split) = (0, 0);
    let mut budget = config.max_gaussians.saturating_sub(n);

    for i in 0..n {
        if stats.mean(i) <= config.densify_grad_threshold {
            continue;
        }
        let parent = cloud.gaussians[i];
        let scale = parent.scale();
        if scale.max() <= clone_limit {
            if budget == 0 {
                continue;
            }
            budget -= 1;
            let mut child = parent;
            let dir = -stats.position_grad[i];
            if dir.norm() > 0.0 {
                let step: f64 = rng.random::<f64>() * scale.max();
                child.position += dir.normalize() * step;
            }
            born.push(child);
            cloned += 1;
        } else {
            if budget == 0 {
                continue;
            }
            budget -= 1;
            let rot = parent.rotation_matrix();
            for _ in 0..2 {
                let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
                let mut child = parent;
                child.position += rot * z.component_mul(&scale);
                child.log_scale -= Vector3::repeat(config.split_scale_factor.ln());
                born.push(child);
            }
            keep[i] = false;
            split += 1;
        }
    }

    let born_count = born.len();
    let mut next: Vec<_> = cloud
        .gaussians
        .iter()
        .zip(&keep)
        .filter(|(_, k)| **k)
        .map(|(g, _)| *g)
        .collect();
    adam.retain(&keep);
    next.extend(born);
    adam.push_zeroed(born_count);

    let alive: Vec<bool> = next
        .iter()
        .map(|g| g.opacity() >= config.prune_opacity_threshold)
        .collect();
    let pruned = alive.iter().filter(|a| !**a).count();
    if pruned == next.len() {
        return Err(Error::EmptyCloud { iteration });
    }
    let mut it = alive.iter();
    next.retain(|_| *it.next().unwrap());
    adam.retain(&alive);

    cloud.gaussians = next;
    *stats = DensityStats::new(cloud.len());
    Ok((cloned, split, pruned))
}

/// Caps every opacity at `ceiling` and clears the opacity moments.
pub fn reset_opacity(cloud: &mut GaussianCloud, adam: &mut AdamState, ceiling: f64) {
    let cap = logit(ceiling);
    for g in &mut cloud.gaussians {
        g.opacity_logit = g.opacity_logit.min(cap);
    }
    adam.reset_slot(OPACITY_SLOT);
}
