//! Adaptive-moment optimizers over flat parameter buffers.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;
#[allow(unused_imports)]
use num_traits::Float;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl AdamW {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grad.len(), self.m.len(), "gradient length mismatch");
        self.steps += 1;
        let bc1 = 1.0 - BETA1.powi(self.steps as i32);
        let bc2 = 1.0 - BETA2.powi(self.steps as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * self.weight_decay * params[i];
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}

/// Lazy Adam: only entries present in a step's sparse gradient are updated.
/// Learning rates may differ per index range.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseAdam {
    lr: f64,
    groups: Vec<(Range<usize>, f64)>,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl SparseAdam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            groups: Vec::new(),
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: 0,
        }
    }

    /// Overrides the learning rate for `range`.
    pub fn with_group(mut self, range: Range<usize>, lr: f64) -> Self {
        self.groups.push((range, lr));
        self
    }

    fn lr_at(&self, i: usize) -> f64 {
        self.groups.iter().rev().find(|(r, _)| r.contains(&i)).map_or(self.lr, |g| g.1)
    }

    /// `entries` must not repeat an index. `scale` multiplies every learning
    /// rate for this step (for schedules).
    pub fn step(&mut self, params: &mut [f64], entries: &[(usize, f64)], scale: f64) {
        self.steps += 1;
        let bc1 = 1.0 - BETA1.powi(self.steps as i32);
        let bc2 = 1.0 - BETA2.powi(self.steps as i32);
        for &(i, g) in entries {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= scale * self.lr_at(i) * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
}

/// Cosine decay from 1 to `floor` over `total` steps.
pub fn cosine_factor(step: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    let p = (step as f64 / (total - 1) as f64).min(1.0);
    floor + (1.0 - floor) * 0.5 * (1.0 + (core::f64::consts::PI * p).cos())
}
