//! AdamW and plain SGD over a model's tensor list, with warmup + cosine
//! learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::tensor::{Grads, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    AdamW,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Linear warmup, then cosine decay to zero at the last step.
    Cosine,
    /// Linear warmup, then flat.
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    /// Peak learning rate.
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f64,
    pub schedule: Schedule,
    /// Fraction of total steps spent warming up.
    pub warmup_frac: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::AdamW,
            lr: 1e-5,
            betas: [0.9, 0.95],
            eps: 1e-8,
            weight_decay: 0.1,
            schedule: Schedule::Cosine,
            warmup_frac: 0.0,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            algorithm: Algorithm::Sgd,
            lr,
            weight_decay: 0.0,
            schedule: Schedule::Constant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.betas.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(invalid(format!("betas must lie in (0, 1), got {:?}", self.betas)));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return Err(invalid("warmup_frac in [0, 1), weight_decay >= 0, eps > 0"));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("grad_clip must be positive"));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let total = total.max(1);
        let warm = (self.warmup_frac * total as f64).round() as usize;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                let span = (total - warm).max(1) as f64;
                let progress = ((step - warm) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Optimizer state for a fixed, ordered list of tensors.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub total_steps: usize,
    /// Updates applied so far.
    pub step: usize,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
}

/// Outcome of one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, params: &[&Tensor<f32>], total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        let zeros = |_: ()| params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect::<Vec<_>>();
        let (m, v) = match cfg.algorithm {
            Algorithm::AdamW => (zeros(()), zeros(())),
            Algorithm::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            cfg,
            total_steps,
            step: 0,
            m,
            v,
        })
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr_at(self.step, self.total_steps)
    }

    /// Applies one update; gradient `i` belongs to `params[i]`.
    pub fn update(&mut self, params: &mut [&mut Tensor<f32>], grads: &Grads<f32>) -> Result<StepInfo> {
        let n = params.len();
        let mut gs: Vec<&Tensor<f32>> = Vec::with_capacity(n);
        for (i, p) in params.iter().enumerate() {
            let g = grads
                .get(i)
                .ok_or_else(|| invalid(format!("no gradient for parameter {i}")))?;
            if g.shape() != p.shape() {
                return Err(shape_err(
                    "optimizer",
                    format!("param {i} is {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
            gs.push(g);
        }
        let grad_norm = gs
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if !grad_norm.is_finite() {
            return Err(crate::Error::NonFinite("gradient".into()));
        }
        let clip = match self.cfg.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        match self.cfg.algorithm {
            Algorithm::Sgd => {
                let s = (lr * clip) as f32;
                for (p, g) in params.iter_mut().zip(&gs) {
                    let decay = if p.rank() >= 2 { (lr * self.cfg.weight_decay) as f32 } else { 0.0 };
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= s * gv + decay * *w;
                    }
                }
            }
            Algorithm::AdamW => {
                let [b1, b2] = self.cfg.betas;
                let t = (self.step + 1) as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                let eps = self.cfg.eps;
                for (i, (p, g)) in params.iter_mut().zip(&gs).enumerate() {
                    let decay = if p.rank() >= 2 { lr * self.cfg.weight_decay } else { 0.0 };
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    for (((w, &gv), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                        let gv = gv as f64 * clip;
                        let mn = b1 * *mi as f64 + (1.0 - b1) * gv;
                        let vn = b2 * *vi as f64 + (1.0 - b2) * gv * gv;
                        *mi = mn as f32;
                        *vi = vn as f32;
                        let upd = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                        *w = (*w as f64 * (1.0 - decay) - upd) as f32;
                    }
                }
            }
        }
        self.step += 1;
        Ok(StepInfo { lr, grad_norm })
    }

    /// Moment tensors keyed `m.<name>` / `v.<name>` for checkpointing.
    pub fn state_tensors(&self, names: &[String]) -> BTreeMap<String, Tensor<f32>> {
        let mut out = BTreeMap::new();
        for (i, n) in names.iter().enumerate().take(self.m.len()) {
            out.insert(format!("m.{n}"), self.m[i].clone());
            out.insert(format!("v.{n}"), self.v[i].clone());
        }
        out
    }

    /// Restores moments saved by [`Self::state_tensors`].
    pub fn load_state(&mut self, names: &[String], step: usize, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for (i, n) in names.iter().enumerate().take(self.m.len()) {
            for (prefix, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let t = tensors
                    .get(&format!("{prefix}.{n}"))
                    .ok_or_else(|| crate::Error::Checkpoint(format!("missing optimizer tensor {prefix}.{n}")))?;
                if t.shape() != slot.shape() {
                    return Err(shape_err("optimizer state", format!("{prefix}.{n} is {:?}", t.shape())));
                }
                *slot = t.clone();
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn cosine_schedule_shape() {
        let c = OptimizerConfig {
            lr: 1.0,
            warmup_frac: 0.1,
            ..Default::default()
        };
        assert!((c.lr_at(0, 100) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9, 100) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10, 100) - 1.0).abs() < 1e-12);
        assert!(c.lr_at(100, 100).abs() < 1e-12);
        assert!(c.lr_at(55, 100) < c.lr_at(30, 100));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(OptimizerConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(OptimizerConfig { betas: [0.9, 1.0], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut x = Tensor::<f32>::new([2], vec![3.0, -2.0]).unwrap();
        let cfg = OptimizerConfig {
            lr: 0.1,
            schedule: Schedule::Constant,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg, &[&x], 500).unwrap();
        for _ in 0..500 {
            let mut t = Tape::new();
            let v = t.param(0, x.clone());
            let sq = t.mul(v, v).unwrap();
            let l = t.sum(sq).unwrap();
            let g = t.backward(l).unwrap();
            opt.update(&mut [&mut x], &g).unwrap();
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn sgd_with_zero_gradient_is_exact_noop() {
        let mut x = Tensor::<f32>::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let before = x.clone();
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.5), &[&x], 10).unwrap();
        let mut t = Tape::new();
        let v = t.param(0, x.clone());
        let l = t.dot_const(v, Tensor::zeros([2, 2])).unwrap();
        let g = t.backward(l).unwrap();
        opt.update(&mut [&mut x], &g).unwrap();
        assert_eq!(x, before);
    }
}
