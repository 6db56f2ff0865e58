//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates of one parameter group.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub steps: u64,
}

impl AdamState {
    /// One update of every parameter that has a gradient in `grads`.
    pub fn step(&mut self, cfg: &AdamWConfig, params: &mut ParamStore, grads: &ParamStore, lr: f64, weight_decay: f64) {
        self.steps += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.steps as i32);
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for `{name}`");
            if self.m.get(name).is_none() {
                self.m.insert(name.clone(), Tensor::zeros(g.rows(), g.cols()));
                self.v.insert(name.clone(), Tensor::zeros(g.rows(), g.cols()));
            }
            let m = self.m.get_mut(name).expect("inserted above");
            let v = self.v.get_mut(name).expect("inserted above");
            let (pd, gd) = (p.data_mut(), g.data());
            for i in 0..gd.len() {
                let gi = gd[i];
                let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
                let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                pd[i] -= lr * weight_decay * pd[i];
                pd[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(groups: &mut [&mut ParamStore], max_norm: f64) -> f64 {
    let norm = groups
        .iter()
        .flat_map(|g| g.iter().map(|(_, t)| t.norm_sq()))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let k = max_norm / norm;
        for g in groups.iter_mut() {
            for (_, t) in g.iter_mut() {
                for v in t.data_mut() {
                    *v *= k;
                }
            }
        }
    }
    norm
}

/// `base_lr·(1 − step/total_steps)`.
pub fn linear_decay_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    assert!(step <= total_steps && total_steps > 0, "step {step} outside 0..={total_steps}");
    base_lr * (1.0 - step as f64 / total_steps as f64)
}
