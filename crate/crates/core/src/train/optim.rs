use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::model::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies only to parameters
/// flagged for it (not to biases or norm parameters).
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub(crate) t: u64,
    pub(crate) m: Vec<ArrayD<f32>>,
    pub(crate) v: Vec<ArrayD<f32>>,
    frozen: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, cfg: AdamWConfig) -> Self {
        let zeros = || params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        AdamW {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
            frozen: vec![false; params.len()],
        }
    }

    /// Excludes matching parameters from updates.
    pub fn freeze(&mut self, params: &ParamStore<f32>, pred: impl Fn(&str) -> bool) {
        for (f, p) in self.frozen.iter_mut().zip(params.iter()) {
            *f = pred(&p.name);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = c.eps as f32;
        for (i, p) in params.iter_mut().enumerate() {
            if self.frozen[i] {
                continue;
            }
            let decay = if p.decay { (lr * c.weight_decay) as f32 } else { 0.0 };
            Zip::from(&mut p.value)
                .and(grads.by_index(i))
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= step * *m / ((*v * inv_bc2).sqrt() + eps) + decay * *w;
                });
        }
    }
}

/// Linear warmup to `peak` over the first `warmup` steps, then linear decay
/// to zero at `total`. Steps are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub peak: f64,
    pub total: u64,
    pub warmup: u64,
}

impl LinearSchedule {
    pub fn new(peak: f64, total: u64, warmup_ratio: f64) -> Self {
        let warmup = ((warmup_ratio * total as f64).round() as u64).min(total);
        LinearSchedule { peak, total, warmup }
    }

    pub fn lr(&self, step: u64) -> f64 {
        if step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return 0.0;
        }
        self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamStore;
    use ndarray::IxDyn;

    #[test]
    fn schedule_peaks_at_warmup_end() {
        let s = LinearSchedule::new(1.0, 100, 0.1);
        let lrs: Vec<f64> = (1..=100).map(|t| s.lr(t)).collect();
        let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(lrs.iter().position(|&x| x == peak), Some(9));
        assert_eq!(s.lr(10), 1.0);
        assert!((s.lr(5) - 0.5).abs() < 1e-12);
        assert!((s.lr(55) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(100), 0.0);
        assert_eq!(LinearSchedule::new(2.0, 10, 0.0).lr(1), 2.0 * 9.0 / 10.0);
    }

    // One scalar parameter, checked against the update rule written out.
    #[test]
    fn matches_reference_update() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", ndarray::ArrayD::from_elem(IxDyn(&[1]), 0.5f32), true);
        let cfg = AdamWConfig::default();
        let mut opt = AdamW::new(&store, cfg);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 0.2 * t as f64;
            let mut grads = Gradients::zeros_like(&store);
            grads.vec_mut(id)[0] = g as f32;
            opt.step(&mut store, &grads, 0.01);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.01 * (mh / (vh.sqrt() + 1e-8) + 0.01 * w);
            assert!((store.vec(id)[0] as f64 - w).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_and_undecayed_parameters() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", ndarray::ArrayD::from_elem(IxDyn(&[2]), 1.0f32), false);
        let b = store.add("b", ndarray::ArrayD::from_elem(IxDyn(&[2]), 1.0f32), true);
        let mut opt = AdamW::new(&store, AdamWConfig::default());
        opt.freeze(&store, |n| n == "b");
        let grads = Gradients::zeros_like(&store);
        opt.step(&mut store, &grads, 0.1);
        assert_eq!(store.vec(a)[0], 1.0);
        assert_eq!(store.vec(b)[0], 1.0);
    }
}
