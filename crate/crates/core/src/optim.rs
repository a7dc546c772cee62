//! ADADELTA optimizer.

use crate::error::{DanError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adadelta {
    pub rho: f64,
    pub eps: f64,
    /// Running mean of squared gradients, one buffer per parameter.
    sq_grad: Vec<Vec<f64>>,
    /// Running mean of squared updates.
    sq_update: Vec<Vec<f64>>,
}

impl Adadelta {
    pub fn new(store: &ParamStore, rho: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            rho,
            eps,
            sq_grad: zeros(),
            sq_update: zeros(),
        }
    }

    /// One update with learning-rate scale `lr` from the gradients held in `store`:
    ///
    /// ```text
    /// E[g²] ← ρ E[g²] + (1-ρ) g²
    /// Δ     = -sqrt(E[Δ²] + ε) / sqrt(E[g²] + ε) · g
    /// E[Δ²] ← ρ E[Δ²] + (1-ρ) Δ²
    /// θ     ← θ + lr · Δ
    /// ```
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.sq_grad.len() {
            return Err(DanError::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.sq_grad.len(),
                store.len()
            )));
        }
        let (rho, eps) = (self.rho, self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let t = store.get_mut(id);
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (eg, ex) = (&mut self.sq_grad[i], &mut self.sq_update[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                eg[j] = rho * eg[j] + (1.0 - rho) * g * g;
                let dx = -((ex[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * g;
                ex[j] = rho * ex[j] + (1.0 - rho) * dx * dx;
                *p += lr * dx;
            }
        }
        Ok(())
    }

    /// Round accumulator state to `f32` precision, matching checkpoint storage.
    pub fn round_to_f32(&mut self) {
        for v in self.sq_grad.iter_mut().chain(&mut self.sq_update).flatten() {
            *v = *v as f32 as f64;
        }
    }

    pub fn sq_grad(&self, index: usize) -> &[f64] {
        &self.sq_grad[index]
    }

    pub fn sq_update(&self, index: usize) -> &[f64] {
        &self.sq_update[index]
    }

    /// Accumulators as named tensors `opt.g2.<param>` and `opt.dx2.<param>`.
    pub fn state_tensors(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * store.len());
        for (i, (name, t)) in store.iter().enumerate() {
            for (prefix, buf) in [("opt.g2.", &self.sq_grad[i]), ("opt.dx2.", &self.sq_update[i])] {
                let v = Tensor::new(t.shape(), buf.clone()).expect("state mirrors parameter shape");
                out.push((format!("{prefix}{name}"), v));
            }
        }
        out
    }

    /// Restore accumulators written by [`state_tensors`](Self::state_tensors).
    pub fn load_state(&mut self, store: &ParamStore, named: &[(String, Tensor)]) -> Result<()> {
        let find = |key: String| {
            named
                .iter()
                .find(|(n, _)| *n == key)
                .map(|(_, t)| t)
                .ok_or_else(|| DanError::Checkpoint(format!("missing optimizer state {key}")))
        };
        for (i, (name, t)) in store.iter().enumerate() {
            let g2 = find(format!("opt.g2.{name}"))?;
            let dx2 = find(format!("opt.dx2.{name}"))?;
            if g2.shape() != t.shape() || dx2.shape() != t.shape() {
                return Err(DanError::Checkpoint(format!("optimizer state shape mismatch for {name}")));
            }
            self.sq_grad[i].copy_from_slice(g2.data());
            self.sq_update[i].copy_from_slice(dx2.data());
        }
        Ok(())
    }
}
