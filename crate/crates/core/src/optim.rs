//! Adam and the cosine learning-rate schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::nn::Parameterized;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Linear ramp from 0 to `lr_max` over the first steps.
    pub warmup_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global L2 gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_max: 2e-3,
            lr_min: 0.0,
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_max >= self.lr_min && self.lr_min >= 0.0 && self.lr_max.is_finite()) {
            return Err(Error::Config(format!(
                "optim needs lr_max >= lr_min >= 0, got lr_max={} lr_min={}",
                self.lr_max, self.lr_min
            )));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return Err(Error::Config("optim betas must lie in [0, 1) and eps must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("optim.grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl CosineSchedule {
    pub fn new(lr_max: f64, lr_min: f64, total_steps: u64) -> Result<Self> {
        if !(lr_max >= lr_min && lr_min >= 0.0) || total_steps == 0 {
            return Err(Error::Config(format!(
                "cosine schedule needs lr_max >= lr_min >= 0 and T >= 1 (lr_max={lr_max}, lr_min={lr_min}, T={total_steps})"
            )));
        }
        Ok(Self {
            lr_max,
            lr_min,
            total_steps,
            warmup_steps: 0,
        })
    }

    pub fn with_warmup(mut self, steps: u64) -> Self {
        self.warmup_steps = steps;
        self
    }

    /// `lr_min + ½(lr_max − lr_min)(1 + cos(πt/T))`; `t > T` clamps to `lr_min`.
    pub fn lr_at(&self, t: u64) -> f64 {
        if t >= self.total_steps {
            return self.lr_min;
        }
        let cos = self.lr_min
            + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * t as f64 / self.total_steps as f64).cos());
        if t < self.warmup_steps {
            cos * (t + 1) as f64 / self.warmup_steps as f64
        } else {
            cos
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(cfg: &OptimConfig) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One bias-corrected update of every parameter that received a gradient.
    ///
    /// All gradients are checked before anything is written, so a non-finite
    /// gradient leaves both parameters and state untouched.
    pub fn step<P: Parameterized>(&mut self, model: &mut P, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {name} at element {i}; step aborted"
                )));
            }
        }
        let mut shape_err = None;
        model.visit_params("", &mut |name, p| {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() && shape_err.is_none() {
                    shape_err = Some(Error::shape("adam", format!("gradient for {name} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
                }
            }
        });
        if let Some(e) = shape_err {
            return Err(e);
        }

        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let moments = &mut self.moments;
        model.visit_params_mut("", &mut |name, p| {
            let Some(g) = grads.get(name) else { return };
            let st = moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let m = st.m.data_mut();
            let v = st.v.data_mut();
            let w = p.data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
        Ok(())
    }
}

/// Collect parameter gradients from a graph after `backward`, by name.
pub fn collect_grads<P: Parameterized>(g: &Graph, model: &P) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    model.visit_params("", &mut |name, p| {
        if let Some(gr) = g.param_grad(p) {
            out.insert(name.to_string(), gr);
        }
    });
    out
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
