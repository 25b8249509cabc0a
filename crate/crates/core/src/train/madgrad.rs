//! Momentumized, adaptive, dual-averaged gradient method (MADGRAD).

use crate::error::{Error, Result};

/// Per-parameter accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub name: String,
    /// Weighted gradient sum `Σ λ_i g_i`.
    pub grad_sum: Vec<f32>,
    /// Weighted squared-gradient sum `Σ λ_i g_i²`.
    pub sq_sum: Vec<f32>,
    /// Iterate at the first step.
    pub x0: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Madgrad {
    pub momentum: f32,
    pub eps: f32,
    /// Steps taken so far.
    pub step: u64,
    pub slots: Vec<Slot>,
}

impl Madgrad {
    /// Creates empty accumulators for the given `(name, initial value)` pairs.
    pub fn new<'a>(momentum: f64, eps: f64, params: impl IntoIterator<Item = (&'a str, &'a [f32])>) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("optimizer eps {eps} must be positive")));
        }
        let slots = params
            .into_iter()
            .map(|(name, x)| Slot {
                name: name.to_string(),
                grad_sum: vec![0.0; x.len()],
                sq_sum: vec![0.0; x.len()],
                x0: x.to_vec(),
            })
            .collect();
        Ok(Self { momentum: momentum as f32, eps: eps as f32, step: 0, slots })
    }

    /// One update. `params[i]` and `grads[i]` belong to `slots[i]`.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        assert_eq!(params.len(), self.slots.len(), "one parameter per slot");
        assert_eq!(grads.len(), self.slots.len(), "one gradient per slot");
        for (slot, g) in self.slots.iter().zip(grads) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {}[{i}] is {} at step {}",
                    slot.name, g[i], self.step
                )));
            }
        }
        let lamb = (lr * ((self.step + 1) as f64).sqrt()) as f32;
        let (m, eps) = (self.momentum, self.eps);
        for ((slot, x), g) in self.slots.iter_mut().zip(params.iter_mut()).zip(grads) {
            assert_eq!(x.len(), slot.x0.len(), "parameter {} changed size", slot.name);
            for i in 0..x.len() {
                let gi = g[i];
                slot.grad_sum[i] += lamb * gi;
                slot.sq_sum[i] += lamb * gi * gi;
                let z = slot.x0[i] - slot.grad_sum[i] / (slot.sq_sum[i].cbrt() + eps);
                x[i] = if m == 0.0 { z } else { m * x[i] + (1.0 - m) * z };
            }
        }
        self.step += 1;
        Ok(())
    }
}
