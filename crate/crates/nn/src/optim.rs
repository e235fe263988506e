use serde::{Deserialize, Serialize};

use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Step decay: `initial · rate^(⌊step / every⌋)`; `every = 0` disables decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub decay_every: u64,
    #[serde(default = "one")]
    pub decay_rate: f64,
}

fn one() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        LrSchedule { initial: lr, decay_every: 0, decay_rate: 1.0 }
    }

    pub fn step_decay(initial: f64, every: u64, rate: f64) -> Self {
        LrSchedule { initial, decay_every: every, decay_rate: rate }
    }

    pub fn rate(&self, step: u64) -> f64 {
        if self.decay_every == 0 {
            self.initial
        } else {
            self.initial * self.decay_rate.powi((step / self.decay_every) as i32)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        OptimConfig { kind: OptimizerKind::Adam, schedule: LrSchedule::constant(lr), clip_norm: Some(5.0), beta1: 0.9, beta2: 0.999 }
    }

    pub fn sgd(schedule: LrSchedule) -> Self {
        OptimConfig { kind: OptimizerKind::Sgd, schedule, clip_norm: Some(5.0), beta1: 0.9, beta2: 0.999 }
    }
}

/// First-order optimizer with optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimConfig,
    step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Self {
        Optimizer { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.schedule.rate(self.step)
    }

    /// Applies one update. Parameters without a gradient are untouched.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Gradients) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        let lr = self.cfg.schedule.rate(self.step);
        self.step += 1;
        let clip = match self.cfg.clip_norm {
            Some(c) => {
                let n = grads.global_norm();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (id, g) in grads.iter() {
                    let p = store.get_mut(id);
                    for (w, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * clip * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
                let t = self.step as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (id, g) in grads.iter() {
                    let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
                    let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.rows(), g.cols()));
                    let p = store.get_mut(id);
                    for (((w, gv), mv), vv) in
                        p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
                    {
                        let gv = gv * clip;
                        *mv = b1 * *mv + (1.0 - b1) * gv;
                        *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                        let mh = *mv / c1;
                        let vh = *vv / c2;
                        *w -= lr * mh / (vh.sqrt() + 1e-8);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    #[test]
    fn schedule_decays_in_steps() {
        let s = LrSchedule::step_decay(0.5, 500, 0.99);
        assert_eq!(s.rate(0), 0.5);
        assert_eq!(s.rate(499), 0.5);
        assert!((s.rate(500) - 0.495).abs() < 1e-15);
        assert!((s.rate(1000) - 0.5 * 0.99 * 0.99).abs() < 1e-15);
    }

    #[test]
    fn sgd_and_adam_minimise_a_quadratic() {
        for cfg in [OptimConfig::sgd(LrSchedule::constant(0.1)), OptimConfig::adam(0.05)] {
            let mut store = ParamStore::new();
            let id = store.add("x", Tensor::vector(vec![3.0, -2.0]));
            let mut opt = Optimizer::new(cfg);
            for _ in 0..500 {
                let mut g = Gradients::for_store(&store);
                let x = store.get(id).clone();
                g.accumulate(ParamId(0), &Tensor::vector(x.data().iter().map(|v| 2.0 * v).collect()));
                opt.apply(&mut store, &g);
            }
            assert!(store.get(id).norm() < 1e-2, "{:?}", store.get(id));
        }
    }

    #[test]
    fn clipping_bounds_the_update() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.0]));
        let mut cfg = OptimConfig::sgd(LrSchedule::constant(1.0));
        cfg.clip_norm = Some(1.0);
        let mut opt = Optimizer::new(cfg);
        let mut g = Gradients::for_store(&store);
        g.accumulate(id, &Tensor::vector(vec![100.0]));
        opt.apply(&mut store, &g);
        assert_eq!(store.get(id).data(), &[-1.0]);
    }
}
