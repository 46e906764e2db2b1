//! SGD with momentum and a warmup + cosine learning-rate schedule.

use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub total_iters: usize,
    /// Fraction of iterations spent in linear warmup.
    pub warmup_frac: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.02, momentum: 0.9, total_iters: 1, warmup_frac: 0.05 }
    }
}

pub struct Sgd {
    cfg: SgdConfig,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, velocity: BTreeMap::new() }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    /// Cosine-decayed learning rate with linear warmup.
    pub fn lr_at(&self, iter: usize) -> f32 {
        let total = self.cfg.total_iters.max(1) as f32;
        let warm = (self.cfg.warmup_frac * total).floor();
        let i = iter as f32;
        if i < warm {
            return self.cfg.lr * (i + 1.0) / warm.max(1.0);
        }
        let progress = ((i - warm) / (total - warm).max(1.0)).min(1.0);
        self.cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * progress).cos())
    }

    /// One momentum step on a single parameter: v = m*v + g; p -= lr*v.
    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32], lr: f32) {
        debug_assert_eq!(param.len(), grad.len());
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; param.len()]);
        let m = self.cfg.momentum;
        for ((p, &g), vi) in param.iter_mut().zip(grad).zip(v.iter_mut()) {
            *vi = m * *vi + g;
            *p -= lr * *vi;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_parameters_bit_identical() {
        let mut sgd = Sgd::new(SgdConfig { lr: 0.0, ..Default::default() });
        let mut p = vec![1.0f32, -2.5, 0.125];
        let before = p.clone();
        sgd.update("w", &mut p, &[10.0, -3.0, 0.5], 0.0);
        let lhs: Vec<u32> = p.iter().map(|f| f.to_bits()).collect();
        let rhs: Vec<u32> = before.iter().map(|f| f.to_bits()).collect();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut sgd = Sgd::new(SgdConfig { lr: 1.0, momentum: 0.5, total_iters: 1, warmup_frac: 0.0 });
        let mut p = vec![0.0f32];
        sgd.update("w", &mut p, &[1.0], 1.0);
        assert_eq!(p[0], -1.0); // v = 1
        sgd.update("w", &mut p, &[1.0], 1.0);
        assert_eq!(p[0], -2.5); // v = 0.5 + 1 = 1.5
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero() {
        let sgd = Sgd::new(SgdConfig { lr: 1.0, momentum: 0.9, total_iters: 100, warmup_frac: 0.1 });
        assert!(sgd.lr_at(0) < sgd.lr_at(5));
        assert!((sgd.lr_at(9) - 1.0).abs() < 1e-6);
        assert!(sgd.lr_at(99) < 0.01);
    }
}
