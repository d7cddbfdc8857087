//! Adam over named variables, with fully serializable state.

use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment optimizer. Moments are keyed by parameter name so state
/// survives checkpointing and resuming bit-for-bit.
pub struct Adam {
    params: Vec<(String, Var)>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: usize,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in &params {
            let z = var.as_tensor().zeros_like()?;
            m.insert(name.clone(), z.clone());
            v.insert(name.clone(), z);
        }
        Ok(Adam {
            params,
            m,
            v,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update with the given learning rate. Parameters absent from the
    /// gradient store (no path to the loss) are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        for (name, var) in &self.params {
            let Some(grad) = grads.get(var) else {
                continue;
            };
            let m = self.m.get_mut(name).expect("moment allocated in new()");
            let v = self.v.get_mut(name).expect("moment allocated in new()");
            *m = ((&*m * ADAM_BETA1)? + (grad * (1.0 - ADAM_BETA1))?)?;
            *v = ((&*v * ADAM_BETA2)? + (grad.sqr()? * (1.0 - ADAM_BETA2))?)?;
            let m_hat = (&*m / bc1)?;
            let v_hat = (&*v / bc2)?;
            let update = (m_hat * lr)?.div(&(v_hat.sqrt()? + ADAM_EPS)?)?;
            var.set(&var.as_tensor().detach().sub(&update)?)?;
        }
        Ok(())
    }

    /// Moment tensors under `opt.m.` / `opt.v.` prefixes.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (n, t) in &self.m {
            out.insert(format!("opt.m.{n}"), t.clone());
        }
        for (n, t) in &self.v {
            out.insert(format!("opt.v.{n}"), t.clone());
        }
        out
    }

    /// Restore moments saved by [`Adam::state_tensors`].
    pub fn load_state(&mut self, tensors: &HashMap<String, Tensor>, step: usize) -> Result<()> {
        for (name, slot) in self.m.iter_mut() {
            let key = format!("opt.m.{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing `{key}`")))?;
            if t.dims() != slot.dims() {
                return Err(Error::Checkpoint(format!(
                    "optimizer state `{key}` has shape {:?}, expected {:?}",
                    t.dims(),
                    slot.dims()
                )));
            }
            *slot = t.clone();
        }
        for (name, slot) in self.v.iter_mut() {
            let key = format!("opt.v.{name}");
            let t = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state missing `{key}`")))?;
            *slot = t.clone();
        }
        self.step = step;
        Ok(())
    }
}
