use crate::rasterizer::GradientBuffer;
use crate::scene::GaussianCloud;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Parameters per Gaussian in optimizer order: position (3), log_scale (3),
/// rotation (4), opacity_logit (1), intensity (1).
pub const PARAMS: usize = 12;
pub(crate) const OPACITY_SLOT: usize = 10;

/// Learning rates per parameter group for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub position: f64,
    pub log_scale: f64,
    pub rotation: f64,
    pub opacity_logit: f64,
    pub intensity: f64,
}

impl GroupRates {
    fn for_slot(&self, slot: usize) -> f64 {
        match slot {
            0..=2 => self.position,
            3..=5 => self.log_scale,
            6..=9 => self.rotation,
            10 => self.opacity_logit,
            _ => self.intensity,
        }
    }
}

/// Adam moments, one row per Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<[f64; PARAMS]>,
    pub second: Vec<[f64; PARAMS]>,
    pub step: u64,
}

fn flatten_grad(g: &GradientBuffer, i: usize) -> [f64; PARAMS] {
    let p = g.position[i];
    let s = g.log_scale[i];
    let r = g.rotation[i];
    [
        p.x,
        p.y,
        p.z,
        s.x,
        s.y,
        s.z,
        r[0],
        r[1],
        r[2],
        r[3],
        g.opacity_logit[i],
        g.intensity[i],
    ]
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            first: vec![[0.0; PARAMS]; n],
            second: vec![[0.0; PARAMS]; n],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.first.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first.is_empty()
    }

    /// One Adam step on every parameter, then quaternion renormalization and
    /// clamping intensity at zero.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &GradientBuffer, rates: &GroupRates) {
        debug_assert_eq!(self.len(), cloud.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr: [f64; PARAMS] = std::array::from_fn(|k| rates.for_slot(k));
        for (i, g) in cloud.gaussians.iter_mut().enumerate() {
            let grad = flatten_grad(grads, i);
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            let mut delta = [0.0; PARAMS];
            for k in 0..PARAMS {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * grad[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * grad[k] * grad[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                delta[k] = lr[k] * m_hat / (v_hat.sqrt() + EPSILON);
            }
            for a in 0..3 {
                g.position[a] -= delta[a];
                g.log_scale[a] -= delta[3 + a];
            }
            if delta[6..10].iter().any(|d| *d != 0.0) {
                for a in 0..4 {
                    g.rotation[a] -= delta[6 + a];
                }
                g.normalize_rotation();
            }
            g.opacity_logit -= delta[OPACITY_SLOT];
            g.intensity = (g.intensity - delta[11]).max(0.0);
        }
    }

    /// Keeps only the rows whose `keep` flag is set.
    pub(crate) fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.first.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.second.retain(|_| *it.next().unwrap());
    }

    pub(crate) fn push_zeroed(&mut self, count: usize) {
        self.first.extend(std::iter::repeat_n([0.0; PARAMS], count));
        self.second.extend(std::iter::repeat_n([0.0; PARAMS], count));
    }

    pub(crate) fn reset_slot(&mut self, slot: usize) {
        for row in self.first.iter_mut().chain(self.second.iter_mut()) {
            row[slot] = 0.0;
        }
    }
}
