use candle_core::backprop::GradStore;
use candle_core::{DType, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{CtError, Result};
use crate::model::{decays, ParamStore};

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * (step + 1) as f64 / warmup_steps as f64;
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps).max(1) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    /// Fraction of all steps spent warming up.
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 6e-4,
            warmup_fraction: 0.1,
            weight_decay: 0.1,
            betas: (0.9, 0.95),
            eps: 1e-8,
            grad_clip: 1.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(CtError::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(CtError::Config(format!(
                "warmup_fraction {} outside [0, 1)",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_fraction * total_steps as f64) as usize
    }
}

/// AdamW with decoupled weight decay on weight matrices only, plus
/// global-norm gradient clipping.
pub struct Trainer {
    decayed: AdamW,
    plain: AdamW,
    vars: Vec<Var>,
    clip: f64,
}

impl Trainer {
    pub fn new(params: &ParamStore, trainable: impl Fn(&str) -> bool, cfg: &OptimConfig) -> Result<Self> {
        let make = |wd: f64| ParamsAdamW {
            lr: cfg.base_lr,
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: cfg.eps,
            weight_decay: wd,
        };
        let decayed = params.vars_where(|n| trainable(n) && decays(n));
        let plain = params.vars_where(|n| trainable(n) && !decays(n));
        let vars = params.vars_where(&trainable);
        Ok(Self {
            decayed: AdamW::new(decayed, make(cfg.weight_decay))?,
            plain: AdamW::new(plain, make(0.0))?,
            vars,
            clip: cfg.grad_clip,
        })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.decayed.set_learning_rate(lr);
        self.plain.set_learning_rate(lr);
    }

    /// Clips, then applies one update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, mut grads: GradStore) -> Result<f64> {
        let mut sq = 0f64;
        for v in &self.vars {
            if let Some(g) = grads.get(v) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if self.clip > 0.0 && norm > self.clip {
            let scale = self.clip / (norm + 1e-6);
            for v in &self.vars {
                if let Some(g) = grads.remove(v) {
                    grads.insert(v, (g * scale)?);
                }
            }
        }
        self.decayed.step(&grads)?;
        self.plain.step(&grads)?;
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert!((lr_at_step(0, 1000, 100, 6e-4) - 6e-6).abs() < 1e-18);
        assert!((lr_at_step(100, 1000, 100, 6e-4) - 6e-4).abs() < 1e-18);
        assert!(lr_at_step(1000, 1000, 100, 6e-4).abs() < 1e-20);
    }

    #[test]
    fn continuous_at_warmup_and_nonincreasing_after() {
        let (total, w, base) = (500, 50, 1e-3);
        assert!((lr_at_step(w - 1, total, w, base) - lr_at_step(w, total, w, base)).abs() < 1e-15);
        for s in w..total {
            assert!(lr_at_step(s + 1, total, w, base) <= lr_at_step(s, total, w, base));
        }
    }
}
