//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{GlassError, Result};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Gradients are rescaled so their global L2 norm does not exceed this.
    pub max_grad_norm: Option<f64>,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

/// What one optimizer step saw.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamW {
    pub fn new(weight_decay: f64, max_grad_norm: Option<f64>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            max_grad_norm,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Global L2 norm over the gradients of `params`.
    pub fn grad_norm(params: &[(String, Var)], grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0f64;
        for (_, v) in params {
            if let Some(g) = grads.get(v.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Updates every parameter that received a gradient.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore, lr: f64) -> Result<StepStats> {
        let grad_norm = Self::grad_norm(params, grads)?;
        self.step_with_norm(params, grads, lr, grad_norm)
    }

    /// As [`AdamW::step`] with the global norm already computed.
    pub fn step_with_norm(&mut self, params: &[(String, Var)], grads: &GradStore, lr: f64, grad_norm: f64) -> Result<StepStats> {
        if !grad_norm.is_finite() {
            return Err(GlassError::invalid("non-finite gradient norm"));
        }
        let present: Vec<(&String, &Var, &Tensor)> = params
            .iter()
            .filter_map(|(n, v)| grads.get(v.as_tensor()).map(|g| (n, v, g)))
            .collect();
        let scale = match self.max_grad_norm {
            Some(max) if grad_norm > max => max / (grad_norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var, g) in present {
            let g = if scale < 1.0 { (g * scale)? } else { g.clone() }.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let p = var.as_tensor();
            let decayed = (p * (1.0 - lr * self.weight_decay))?;
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            var.set(&(decayed - (update * lr)?)?.detach())?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(StepStats {
            grad_norm,
            clipped: scale < 1.0,
        })
    }

    /// Moments as `m.<name>` / `v.<name>` plus a scalar `step`.
    pub fn state_tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (n, t) in &self.m {
            out.insert(format!("m.{n}"), t.clone());
        }
        for (n, t) in &self.v {
            out.insert(format!("v.{n}"), t.clone());
        }
        out.insert("step".into(), Tensor::new(&[self.step as f64], &candle_core::Device::Cpu)?);
        Ok(out)
    }

    pub fn load_state_tensors(&mut self, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.step = 0;
        for (k, t) in state {
            if let Some(n) = k.strip_prefix("m.") {
                self.m.insert(n.to_string(), t.clone());
            } else if let Some(n) = k.strip_prefix("v.") {
                self.v.insert(n.to_string(), t.clone());
            } else if k == "step" {
                self.step = t.to_vec1::<f64>()?[0] as u64;
            } else {
                return Err(GlassError::Checkpoint(format!("unknown optimizer entry `{k}`")));
            }
        }
        Ok(())
    }
}
