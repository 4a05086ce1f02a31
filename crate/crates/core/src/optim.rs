//! AdamW with decoupled weight decay and learning-rate schedules.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

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
            weight_decay: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    Constant,
    Linear,
    Cosine,
}

impl Schedule {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "constant" => Ok(Schedule::Constant),
            "linear" => Ok(Schedule::Linear),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::Config(format!("unknown LR schedule '{s}'"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Schedule::Constant => "constant",
            Schedule::Linear => "linear",
            Schedule::Cosine => "cosine",
        }
    }

    /// Learning rate at 0-based `step` of `total`. Decaying schedules reach
    /// zero on the last step.
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return base;
        }
        let p = (step.min(total - 1)) as f64 / (total - 1) as f64;
        match self {
            Schedule::Constant => base,
            Schedule::Linear => base * (1.0 - p),
            Schedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()),
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
    decay: bool,
}

/// Optimizer over named variables. Weight decay applies to matrices only
/// (rank >= 2); vectors, gains and the temperature are not decayed.
pub struct AdamW {
    cfg: AdamWConfig,
    slots: Vec<Slot>,
    steps: u64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamWConfig) -> Result<Self> {
        let slots = params
            .into_iter()
            .map(|(name, var)| {
                let zeros = var.as_tensor().zeros_like()?;
                Ok(Slot {
                    decay: var.rank() >= 2,
                    name,
                    m: zeros.clone(),
                    v: zeros,
                    var,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamW { cfg, slots, steps: 0 })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.iter().map(|s| s.name.as_str())
    }

    /// One update. Variables without a gradient are left untouched, but
    /// the step counter still advances.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.to_dtype(slot.var.dtype())?;
            slot.m = ((&slot.m * b1)? + (&g * (1.0 - b1))?)?;
            slot.v = ((&slot.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&slot.m / c1)?;
            let v_hat = (&slot.v / c2)?;
            let mut update = m_hat.div(&(v_hat.sqrt()? + self.cfg.eps)?)?;
            let theta = slot.var.as_tensor().detach();
            if slot.decay && self.cfg.weight_decay > 0.0 {
                update = (update + (&theta * self.cfg.weight_decay)?)?;
            }
            slot.var.set(&(theta - (update * lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors as `optim.m.<name>` / `optim.v.<name>`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.slots.len());
        for s in &self.slots {
            out.push((format!("optim.m.{}", s.name), s.m.clone()));
            out.push((format!("optim.v.{}", s.name), s.v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, steps: u64, tensors: &[(String, Tensor)]) -> Result<()> {
        let find = |key: String, like: &Tensor| -> Result<Tensor> {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor '{key}'")))?;
            if t.shape() != like.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for '{key}'")));
            }
            Ok(t.to_dtype(like.dtype())?)
        };
        for s in &mut self.slots {
            s.m = find(format!("optim.m.{}", s.name), &s.m)?;
            s.v = find(format!("optim.v.{}", s.name), &s.v)?;
        }
        self.steps = steps;
        Ok(())
    }
}
