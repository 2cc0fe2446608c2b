//! Low-rank adapters, noisy top-k routing, and mixtures of LoRA experts.
//!
//! Weight orientation follows the crate's row-major token convention: a
//! host layer stores its weight as `(in, out)` and maps `(tokens, in)` to
//! `(tokens, out)`. A rank-r expert therefore holds `a: (in, r)` and
//! `b: (r, out)`, and its update reads `x · a · b · (alpha/rank)`, the
//! transpose of the usual column-vector formulation `(alpha/r)·B·A·x`.
//!
//! Expert `b` matrices start at zero, so attaching or extending a bank
//! never changes the host's outputs until training moves them.

mod inject;

pub use inject::{extend_with_expert, inject, AdapterTarget, InjectReport, ALL_TARGETS};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, GateRecord};
use crate::tensor::{RngState, Scalar, TensorBase};

/// Bank hyperparameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    /// LoRA scale; the applied factor is `alpha / rank`.
    pub alpha: f64,
    pub num_experts: usize,
    pub top_k: usize,
    /// Renormalize gate weights over the selected set (off by default:
    /// the raw softmax weights of the selected experts are used).
    pub renormalize: bool,
    /// Std of the Gaussian init for `a` matrices.
    pub a_init_std: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 8,
            alpha: 8.0,
            num_experts: 5,
            top_k: 3,
            renormalize: false,
            a_init_std: 0.02,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if self.num_experts == 0 {
            return Err(Error::Config("adapter bank needs at least one expert".into()));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::Config(format!(
                "top_k {} out of range for {} experts",
                self.top_k, self.num_experts
            )));
        }
        Ok(())
    }

    /// Single-expert configuration used by plain-LoRA adaptation.
    pub fn single(rank: usize, alpha: f64) -> Self {
        AdapterConfig {
            rank,
            alpha,
            num_experts: 1,
            top_k: 1,
            ..Default::default()
        }
    }
}

/// One low-rank expert: `a: (in, rank)` Gaussian, `b: (rank, out)` zero.
pub struct LoraExpert<E: Scalar> {
    pub a: TensorBase<E>,
    pub b: TensorBase<E>,
    pub rank: usize,
    pub alpha: f64,
}

impl<E: Scalar> LoraExpert<E> {
    pub fn new(
        rng: &mut RngState,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rank: usize,
        alpha: f64,
        a_init_std: f64,
    ) -> Self {
        let a = TensorBase::param(
            format!("{name}.a"),
            (0..fan_in * rank)
                .map(|_| E::from_f64(rng.normal_f64() * a_init_std))
                .collect(),
            &[fan_in, rank],
        )
        .expect("shape consistent");
        let b = TensorBase::param(
            format!("{name}.b"),
            vec![E::zero(); rank * fan_out],
            &[rank, fan_out],
        )
        .expect("shape consistent");
        LoraExpert { a, b, rank, alpha }
    }

    pub fn fan_in(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.b.shape()[1]
    }

    /// The scaled low-rank update applied to a token matrix.
    pub fn delta_apply(&self, x: &TensorBase<E>) -> Result<TensorBase<E>> {
        let scale = E::from_f64(self.alpha / self.rank as f64);
        Ok(x.matmul(&self.a)?.matmul(&self.b)?.scale(scale))
    }

    /// `w0 + (alpha/rank) * a·b` without touching `w0`.
    pub fn merged_weight(&self, w0: &TensorBase<E>) -> Result<TensorBase<E>> {
        let scale = E::from_f64(self.alpha / self.rank as f64);
        w0.add(&self.a.matmul(&self.b)?.scale(scale))
    }

    pub fn is_trainable(&self) -> bool {
        self.a.requires_grad() || self.b.requires_grad()
    }

    pub fn set_trainable(&self, flag: bool) {
        self.a.set_requires_grad(flag);
        self.b.set_requires_grad(flag);
    }

    pub fn params(&self, out: &mut Vec<TensorBase<E>>) {
        out.push(self.a.clone());
        out.push(self.b.clone());
    }
}

/// Adapted forward through a single expert: `x·w0 + (alpha/r)·(x·a)·b`.
pub fn lora_forward<E: Scalar>(
    w0: &TensorBase<E>,
    expert: &LoraExpert<E>,
    x: &TensorBase<E>,
) -> Result<TensorBase<E>> {
    if w0.shape()[0] != expert.fan_in() || w0.shape()[1] != expert.fan_out() {
        return Err(Error::Contract(format!(
            "lora_forward: host weight {:?} does not match expert ({}, {})",
            w0.shape(),
            expert.fan_in(),
            expert.fan_out()
        )));
    }
    x.matmul(w0)?.add(&expert.delta_apply(x)?)
}

/// Merge an expert into a host weight, returning the new weight.
pub fn lora_merge<E: Scalar>(
    w0: &TensorBase<E>,
    expert: &LoraExpert<E>,
) -> Result<TensorBase<E>> {
    if w0.shape()[0] != expert.fan_in() || w0.shape()[1] != expert.fan_out() {
        return Err(Error::Contract(format!(
            "lora_merge: host weight {:?} does not match expert ({}, {})",
            w0.shape(),
            expert.fan_in(),
            expert.fan_out()
        )));
    }
    expert.merged_weight(w0)
}

/// Noisy gating network: `softmax(x·wg + eps)` with `eps ~ N(mu, sigma^2 I)`
/// during training and `eps = mu` at inference.
pub struct Router<E: Scalar> {
    pub wg: TensorBase<E>,
    pub noise_mu: TensorBase<E>,
    pub noise_log_sigma: TensorBase<E>,
    pub top_k: usize,
}

impl<E: Scalar> Router<E> {
    pub fn new(name: &str, fan_in: usize, num_experts: usize, top_k: usize) -> Self {
        Router {
            wg: TensorBase::param(
                format!("{name}.wg"),
                vec![E::zero(); fan_in * num_experts],
                &[fan_in, num_experts],
            )
            .expect("shape consistent"),
            noise_mu: TensorBase::param(format!("{name}.noise_mu"), vec![E::zero()], &[1])
                .expect("shape consistent"),
            noise_log_sigma: TensorBase::param(
                format!("{name}.noise_log_sigma"),
                vec![E::zero()],
                &[1],
            )
            .expect("shape consistent"),
            top_k,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.wg.shape()[1]
    }

    /// Nonnegative per-token gate weights summing to one: `(tokens, N)`.
    pub fn gate(&self, x: &TensorBase<E>, ctx: &mut ForwardCtx<E>) -> Result<TensorBase<E>> {
        let n = self.num_experts();
        let tokens = x.rows();
        let base = x.matmul(&self.wg)?;
        let ones_row = TensorBase::ones(&[1, n]);
        let mu_row = self.noise_mu.reshape(&[1, 1])?.matmul(&ones_row)?;
        let logits = if ctx.training {
            let sigma_row = self
                .noise_log_sigma
                .reshape(&[1, 1])?
                .exp()
                .matmul(&ones_row)?;
            let draws = ctx.rng.normal_tensor::<E>(&[tokens, n]);
            let eps = draws.mul_rowvec(&sigma_row.reshape(&[n])?)?;
            base.add(&eps)?
                .add_rowvec(&mu_row.reshape(&[n])?)?
        } else {
            base.add_rowvec(&mu_row.reshape(&[n])?)?
        };
        logits.softmax(1)
    }

    pub fn params(&self, out: &mut Vec<TensorBase<E>>) {
        out.push(self.wg.clone());
        out.push(self.noise_mu.clone());
        out.push(self.noise_log_sigma.clone());
    }

    pub fn set_trainable(&self, flag: bool) {
        self.wg.set_requires_grad(flag);
        self.noise_mu.set_requires_grad(flag);
        self.noise_log_sigma.set_requires_grad(flag);
    }

    /// Grow the gating matrix by one zero-initialized expert column.
    fn grow(&mut self) {
        let fan_in = self.wg.shape()[0];
        let n = self.num_experts();
        let old = self.wg.to_vec();
        let mut data = vec![E::zero(); fan_in * (n + 1)];
        for i in 0..fan_in {
            data[i * (n + 1)..i * (n + 1) + n].copy_from_slice(&old[i * n..(i + 1) * n]);
        }
        let name = self.wg.name().unwrap_or("router.wg").to_string();
        let trainable = self.wg.requires_grad();
        self.wg = TensorBase::param(name, data, &[fan_in, n + 1]).expect("shape consistent");
        self.wg.set_requires_grad(trainable);
    }
}

/// Indices of the `k` largest weights, ties broken toward the lowest index.
pub fn topk_select<E: Scalar>(weights: &[E], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > weights.len() {
        return Err(Error::Contract(format!(
            "topk_select: k {} out of range for {} weights",
            k,
            weights.len()
        )));
    }
    let mut idx: Vec<usize> = (0..weights.len()).collect();
    idx.sort_by(|&i, &j| {
        weights[j]
            .partial_cmp(&weights[i])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    let mut sel = idx[..k].to_vec();
    sel.sort_unstable();
    Ok(sel)
}

/// A bank of LoRA experts plus a router, attached to one host layer.
pub struct AdapterBank<E: Scalar> {
    pub experts: Vec<LoraExpert<E>>,
    pub router: Router<E>,
    pub renormalize: bool,
    name: String,
}

impl<E: Scalar> AdapterBank<E> {
    pub fn new(
        rng: &mut RngState,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        cfg: &AdapterConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let experts = (0..cfg.num_experts)
            .map(|i| {
                LoraExpert::new(
                    rng,
                    &format!("{name}.expert{i}"),
                    fan_in,
                    fan_out,
                    cfg.rank,
                    cfg.alpha,
                    cfg.a_init_std,
                )
            })
            .collect();
        Ok(AdapterBank {
            experts,
            router: Router::new(&format!("{name}.router"), fan_in, cfg.num_experts, cfg.top_k),
            renormalize: cfg.renormalize,
            name: name.to_string(),
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    /// Routed low-rank delta: `sum_{i in S(x)} G_i(x) (alpha/r) (x a_i) b_i`
    /// per token. Empty banks are a contract error.
    pub fn forward_delta(
        &self,
        x: &TensorBase<E>,
        ctx: &mut ForwardCtx<E>,
    ) -> Result<TensorBase<E>> {
        if self.experts.is_empty() {
            return Err(Error::Contract("adapter bank has no experts".into()));
        }
        let n = self.num_experts();
        let tokens = x.rows();
        let k = self.router.top_k.min(n);
        let gates = self.router.gate(x, ctx)?;

        // Hard selection mask from the gate values (constant w.r.t. the
        // graph; gradients flow through the selected gate weights only).
        let gv = gates.to_vec();
        let mut mask = vec![false; tokens * n];
        for t in 0..tokens {
            let row = &gv[t * n..(t + 1) * n];
            for i in topk_select(row, k)? {
                mask[t * n + i] = true;
            }
        }

        let mut denom: Option<TensorBase<E>> = None;
        if self.renormalize {
            let mask_all = TensorBase::from_vec(
                mask.iter()
                    .map(|&m| if m { E::one() } else { E::zero() })
                    .collect(),
                &[tokens, n],
            )?;
            let masked = gates.mul(&mask_all)?;
            // Row sums of the selected weights.
            let ones_col = TensorBase::ones(&[n, 1]);
            denom = Some(masked.matmul(&ones_col)?.affine(E::one(), E::from_f64(1e-12)));
        }

        let mut delta: Option<TensorBase<E>> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            if !(0..tokens).any(|t| mask[t * n + i]) {
                continue;
            }
            let mask_col = TensorBase::from_vec(
                (0..tokens)
                    .map(|t| if mask[t * n + i] { E::one() } else { E::zero() })
                    .collect(),
                &[tokens, 1],
            )?;
            let mut weight_col = gates.slice_cols(i, i + 1)?.mul(&mask_col)?;
            if let Some(d) = &denom {
                weight_col = weight_col.div(d)?;
            }
            let contrib = expert.delta_apply(x)?.mul_colvec(&weight_col)?;
            delta = Some(match delta {
                Some(acc) => acc.add(&contrib)?,
                None => contrib,
            });
        }
        if let Some(records) = &mut ctx.gate_records {
            records.push(GateRecord {
                gates: gates.clone(),
                mask,
                num_experts: n,
            });
        }
        Ok(match delta {
            Some(d) => d,
            None => TensorBase::zeros(&[tokens, self.experts[0].fan_out()]),
        })
    }

    /// Append one zero-delta expert and grow the router; existing experts
    /// freeze, the new expert and the router stay trainable.
    pub fn extend(&mut self, rng: &mut RngState, a_init_std: f64) {
        let fan_in = self.experts[0].fan_in();
        let fan_out = self.experts[0].fan_out();
        let (rank, alpha) = (self.experts[0].rank, self.experts[0].alpha);
        for e in &self.experts {
            e.set_trainable(false);
        }
        let idx = self.experts.len();
        self.experts.push(LoraExpert::new(
            rng,
            &format!("{}.expert{idx}", self.name),
            fan_in,
            fan_out,
            rank,
            alpha,
            a_init_std,
        ));
        self.router.grow();
        self.router.set_trainable(true);
    }

    pub fn params(&self, out: &mut Vec<TensorBase<E>>) {
        for e in &self.experts {
            e.params(out);
        }
        self.router.params(out);
    }
}

/// Load-balance objective over collected gate records:
/// `N * sum_i (fraction routed to i) * (mean gate weight of i)`,
/// averaged across records. The fraction normalizes over all selections
/// (so it sums to one across experts); the value is 1 under perfectly
/// uniform routing and N when all traffic collapses onto one expert.
pub fn load_balance_loss<E: Scalar>(records: &[GateRecord<E>]) -> Result<TensorBase<E>> {
    if records.is_empty() {
        return Err(Error::Contract("load_balance_loss: no gate records".into()));
    }
    let mut total: Option<TensorBase<E>> = None;
    for rec in records {
        let n = rec.num_experts;
        let tokens = rec.gates.rows();
        let mean_gate = rec.gates.sum_rows()?.scale(E::from_f64(1.0 / tokens as f64));
        let selections = rec.mask.iter().filter(|&&m| m).count().max(1);
        let mut fraction = vec![E::zero(); n];
        for t in 0..tokens {
            for i in 0..n {
                if rec.mask[t * n + i] {
                    fraction[i] += E::from_f64(1.0 / selections as f64);
                }
            }
        }
        let fraction = TensorBase::from_vec(fraction, &[1, n])?;
        let term = mean_gate
            .mul(&fraction)?
            .sum_all()
            .scale(E::from_f64(n as f64));
        total = Some(match total {
            Some(acc) => acc.add(&term)?,
            None => term,
        });
    }
    Ok(total
        .expect("nonempty records")
        .scale(E::from_f64(1.0 / records.len() as f64)))
}
