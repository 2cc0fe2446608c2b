//! AdamW with decoupled weight decay.

use std::collections::HashMap;

use super::{Gradients, Scalar, TensorBase};
use crate::error::{Error, Result};

/// Hyperparameters for [`AdamW`].
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamWConfig {
            lr,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config("adamw: learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adamw: betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// AdamW optimizer. Moment buffers are keyed by parameter identity, so the
/// same optimizer instance must be stepped with the same parameter set.
/// Weight decay is decoupled: it shrinks parameters directly and never
/// enters the moment estimates. Per-step arithmetic runs in f64; moments
/// are stored at parameter precision so checkpointed state resumes
/// bit-exactly.
pub struct AdamW<E: Scalar> {
    cfg: AdamWConfig,
    step: u64,
    moments: HashMap<u64, (Vec<E>, Vec<E>)>,
}

impl<E: Scalar> AdamW<E> {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AdamW {
            cfg,
            step: 0,
            moments: HashMap::new(),
        })
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter that received a gradient.
    /// Parameters without a gradient (frozen or unused) are left untouched
    /// by the Adam update but still receive weight decay only if they were
    /// part of the update; i.e. frozen tensors never change.
    pub fn step(&mut self, params: &[TensorBase<E>], grads: &Gradients<E>) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let lr = self.cfg.lr;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let eps = self.cfg.eps;
        let wd = self.cfg.weight_decay;
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);

        for p in params {
            let Some(g) = grads.get_raw(p) else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Optimizer {
                    param: p.name().unwrap_or("<unnamed>").to_string(),
                    message: "non-finite gradient".into(),
                });
            }
            let (m, v) = self
                .moments
                .entry(p.id())
                .or_insert_with(|| (vec![E::zero(); p.numel()], vec![E::zero(); p.numel()]));
            p.update_in_place(|data| {
                for i in 0..data.len() {
                    let gi = Scalar::to_f64(g[i]);
                    let mi = b1 * Scalar::to_f64(m[i]) + (1.0 - b1) * gi;
                    let vi = b2 * Scalar::to_f64(v[i]) + (1.0 - b2) * gi * gi;
                    m[i] = E::from_f64(mi);
                    v[i] = E::from_f64(vi);
                    let m_hat = mi / bias1;
                    let v_hat = vi / bias2;
                    let x = Scalar::to_f64(data[i]);
                    data[i] = E::from_f64(x - lr * (m_hat / (v_hat.sqrt() + eps) + wd * x));
                }
            });
        }
        Ok(())
    }

    /// Export moment buffers as named tensors for checkpointing.
    pub fn export_moments(&self, params: &[(String, TensorBase<E>)]) -> Vec<(String, Vec<E>)> {
        let mut out = Vec::new();
        for (name, p) in params {
            if let Some((m, v)) = self.moments.get(&p.id()) {
                out.push((format!("optim.m.{name}"), m.clone()));
                out.push((format!("optim.v.{name}"), v.clone()));
            }
        }
        out
    }

    /// Restore moment buffers from checkpoint payloads.
    pub fn restore_moments(
        &mut self,
        params: &[(String, TensorBase<E>)],
        lookup: impl Fn(&str) -> Option<Vec<E>>,
        step: u64,
    ) {
        self.step = step;
        for (name, p) in params {
            let m = lookup(&format!("optim.m.{name}"));
            let v = lookup(&format!("optim.v.{name}"));
            if let (Some(m), Some(v)) = (m, v) {
                if m.len() == p.numel() && v.len() == p.numel() {
                    self.moments.insert(p.id(), (m, v));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_grad_zero_decay_leaves_params() {
        let p = Tensor::param("p", vec![1.5, -2.0], &[2]).unwrap();
        let zero_loss = p.scale(0.0).sum_all();
        let grads = zero_loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1)).unwrap();
        opt.step(&[p.clone()], &grads).unwrap();
        assert_eq!(p.to_vec(), vec![1.5, -2.0]);
    }

    #[test]
    fn single_step_matches_hand_formula() {
        // One AdamW step, lr=0.1, betas (0.9, 0.999), eps 1e-8, wd 0,
        // param 1.0, grad 1.0:
        //   m_hat = g = 1.0, v_hat = g^2 = 1.0
        //   p' = 1.0 - 0.1 * 1.0 / (sqrt(1.0) + 1e-8)
        let p = Tensor::param("p", vec![1.0f32], &[1]).unwrap();
        let loss = p.sum_all(); // grad = 1
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1)).unwrap();
        opt.step(&[p.clone()], &grads).unwrap();
        let expect = (1.0f64 - 0.1 * (1.0 / (1.0 + 1e-8))) as f32;
        assert_eq!(p.to_vec()[0], expect);
    }

    #[test]
    fn decay_only_path_shrinks_exactly() {
        let p = Tensor::param("p", vec![2.0f32], &[1]).unwrap();
        let zero_loss = p.scale(0.0).sum_all();
        let grads = zero_loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        })
        .unwrap();
        opt.step(&[p.clone()], &grads).unwrap();
        let expect = (2.0f64 - 0.1 * 0.01 * 2.0) as f32;
        assert_eq!(p.to_vec()[0], expect);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let p = Tensor::param("model.block.w", vec![1.0], &[1]).unwrap();
        let bad = p.ln().ln(); // ln(ln(1)) = ln(0) = -inf, grad non-finite
        let loss = bad.sum_all();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::with_lr(0.1)).unwrap();
        let err = opt.step(&[p.clone()], &grads).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.block.w"), "message: {msg}");
    }
}
