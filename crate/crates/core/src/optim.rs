//! Adam with bias-corrected moments.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    params: AdamParams,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new<'a>(vars: impl IntoIterator<Item = &'a Var>, params: AdamParams) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|var| {
                Ok(Slot { var: var.clone(), m: var.as_tensor().zeros_like()?, v: var.as_tensor().zeros_like()? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, step: 0, slots })
    }

    pub fn learning_rate(&self) -> f64 {
        self.params.lr
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.params.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Variables absent from `grads` are left untouched.
    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let AdamParams { lr, beta1, beta2, eps } = self.params;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else { continue };
            let g = g.detach();
            slot.m = (slot.m.affine(beta1, 0.0)? + g.affine(1.0 - beta1, 0.0)?)?;
            slot.v = (slot.v.affine(beta2, 0.0)? + g.sqr()?.affine(1.0 - beta2, 0.0)?)?;
            let denom = (slot.v.affine(1.0 / c2, 0.0)?.sqrt()? + eps)?;
            let update = slot.m.affine(lr / c1, 0.0)?.div(&denom)?;
            let next = slot.var.as_detached_tensor().sub(&update)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }
}
