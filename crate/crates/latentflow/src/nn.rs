//! Shared neural building blocks: linear layers (with an optional
//! mixture-of-LoRA adapter slot), LSTMs and multi-head self-attention.

use crate::adapters::AdapterBank;
use crate::error::{Error, Result};
use crate::tensor::{RngState, Scalar, TensorBase};

/// Per-forward state: mode flag plus the rng that feeds stochastic pieces
/// (gating noise, reparameterization). Gate activations are recorded here
/// when a load-balance term or routing statistics are wanted.
pub struct ForwardCtx<E: Scalar> {
    pub training: bool,
    pub rng: RngState,
    /// When set, adapter banks push their per-token gate weights and
    /// top-k masks here.
    pub gate_records: Option<Vec<GateRecord<E>>>,
}

/// Gate weights and selection mask captured from one adapted layer.
pub struct GateRecord<E: Scalar> {
    pub gates: TensorBase<E>,
    pub mask: Vec<bool>,
    pub num_experts: usize,
}

impl<E: Scalar> ForwardCtx<E> {
    pub fn training(rng: RngState) -> Self {
        ForwardCtx {
            training: true,
            rng,
            gate_records: None,
        }
    }

    pub fn inference() -> Self {
        ForwardCtx {
            training: false,
            rng: RngState::new(0, 0),
            gate_records: None,
        }
    }

    pub fn record_gates(mut self) -> Self {
        self.gate_records = Some(Vec::new());
        self
    }
}

/// Uniform Xavier/Glorot draw.
pub fn xavier<E: Scalar>(
    rng: &mut RngState,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> TensorBase<E> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| E::from_f64(rng.uniform_range(-limit, limit)))
        .collect();
    TensorBase::param(name, data, &[fan_in, fan_out]).expect("shape consistent")
}

/// Dense layer storing its weight as (in, out); inputs are row-major token
/// matrices `(tokens, in)`. An attached [`AdapterBank`] adds its routed
/// low-rank delta on top of the frozen base map.
pub struct Linear<E: Scalar> {
    pub weight: TensorBase<E>,
    pub bias: Option<TensorBase<E>>,
    pub bank: Option<AdapterBank<E>>,
    name: String,
}

impl<E: Scalar> Linear<E> {
    pub fn new(rng: &mut RngState, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = xavier(rng, &format!("{name}.weight"), fan_in, fan_out);
        let bias = TensorBase::param(format!("{name}.bias"), vec![E::zero(); fan_out], &[fan_out])
            .expect("shape consistent");
        Linear {
            weight,
            bias: Some(bias),
            bank: None,
            name: name.to_string(),
        }
    }

    /// Zero-initialized layer (residual-branch and output heads).
    pub fn zeros(name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = TensorBase::param(
            format!("{name}.weight"),
            vec![E::zero(); fan_in * fan_out],
            &[fan_in, fan_out],
        )
        .expect("shape consistent");
        let bias = TensorBase::param(format!("{name}.bias"), vec![E::zero(); fan_out], &[fan_out])
            .expect("shape consistent");
        Linear {
            weight,
            bias: Some(bias),
            bank: None,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &TensorBase<E>, ctx: &mut ForwardCtx<E>) -> Result<TensorBase<E>> {
        let mut out = x.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            out = out.add_rowvec(b)?;
        }
        if let Some(bank) = &self.bank {
            let delta = bank.forward_delta(x, ctx)?;
            out = out.add(&delta)?;
        }
        Ok(out)
    }

    /// Backbone parameters (adapter parameters live on the bank).
    pub fn params(&self, out: &mut Vec<TensorBase<E>>) {
        out.push(self.weight.clone());
        if let Some(b) = &self.bias {
            out.push(b.clone());
        }
    }
}

/// Single-direction LSTM over a step-sliced sequence.
pub struct Lstm<E: Scalar> {
    pub w_ih: TensorBase<E>,
    pub w_hh: TensorBase<E>,
    pub bias: TensorBase<E>,
    hidden: usize,
}

impl<E: Scalar> Lstm<E> {
    pub fn new(rng: &mut RngState, name: &str, input: usize, hidden: usize) -> Self {
        Lstm {
            w_ih: xavier(rng, &format!("{name}.w_ih"), input, 4 * hidden),
            w_hh: xavier(rng, &format!("{name}.w_hh"), hidden, 4 * hidden),
            bias: TensorBase::param(
                format!("{name}.bias"),
                vec![E::zero(); 4 * hidden],
                &[4 * hidden],
            )
            .expect("shape consistent"),
            hidden,
        }
    }

    /// Run over `steps` (each `(batch, input)`), returning per-step hidden
    /// states `(batch, hidden)`.
    pub fn run(&self, steps: &[TensorBase<E>]) -> Result<Vec<TensorBase<E>>> {
        let h_dim = self.hidden;
        let batch = steps.first().map(|s| s.rows()).unwrap_or(0);
        let mut h = TensorBase::zeros(&[batch, h_dim]);
        let mut c = TensorBase::zeros(&[batch, h_dim]);
        let mut out = Vec::with_capacity(steps.len());
        for x in steps {
            let gates = x
                .matmul(&self.w_ih)?
                .add(&h.matmul(&self.w_hh)?)?
                .add_rowvec(&self.bias)?;
            let i = gates.slice_cols(0, h_dim)?.sigmoid();
            let f = gates.slice_cols(h_dim, 2 * h_dim)?.sigmoid();
            let g = gates.slice_cols(2 * h_dim, 3 * h_dim)?.tanh();
            let o = gates.slice_cols(3 * h_dim, 4 * h_dim)?.sigmoid();
            c = f.mul(&c)?.add(&i.mul(&g)?)?;
            h = o.mul(&c.tanh())?;
            out.push(h.clone());
        }
        Ok(out)
    }

    pub fn params(&self, out: &mut Vec<TensorBase<E>>) {
        out.push(self.w_ih.clone());
        out.push(self.w_hh.clone());
        out.push(self.bias.clone());
    }
}

/// Bidirectional LSTM with a projection back to `out_dim`. The projection
/// is zero-initialized so a fresh module is transparent inside residual
/// blocks.
pub struct BiLstm<E: Scalar> {
    pub fwd: Lstm<E>,
    pub bwd: Lstm<E>,
    pub proj: Linear<E>,
}

impl<E: Scalar> BiLstm<E> {
    pub fn new(rng: &mut RngState, name: &str, input: usize, hidden: usize, out_dim: usize) -> Self {
        BiLstm {
            fwd: Lstm::new(rng, &format!("{name}.fwd"), input, hidden),
            bwd: Lstm::new(rng, &format!("{name}.bwd"), input, hidden),
            proj: Linear::zeros(&format!("{name}.proj"), 2 * hidden, out_dim),
        }
    }

    /// Per-step `(batch, out_dim)` outputs.
    pub fn run(&self, steps: &[TensorBase<E>], ctx: &mut ForwardCtx<E>) -> Result<Vec<TensorBase<E>>> {
        let n = steps.len();
        let fwd = self.fwd.run(steps)?;
        let rev: Vec<TensorBase<E>> = steps.iter().rev().cloned().collect();
        let mut bwd = self.bwd.run(&rev)?;
        bwd.reverse();
        let mut out = Vec::with_capacity(n);
        for (f, b) in fwd.iter().zip(&bwd) {
            let cat = TensorBase::concat_cols(&[f.clone(), b.clone()])?;
            out.push(self.proj.forward(&cat, ctx)?);
        }
        Ok(out)
    }

    pub fn params(&self, out: &mut Vec<TensorBase<E>>) {
        self.fwd.params(out);
        self.bwd.params(out);
        self.proj.params(out);
    }
}

/// Multi-head self-attention over a `(tokens, dim)` matrix.
pub struct Mhsa<E: Scalar> {
    pub wq: Linear<E>,
    pub wk: Linear<E>,
    pub wv: Linear<E>,
    pub wo: Linear<E>,
    heads: usize,
}

impl<E: Scalar> Mhsa<E> {
    pub fn new(rng: &mut RngState, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "mhsa: dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Mhsa {
            wq: Linear::new(rng, &format!("{name}.wq"), dim, dim),
            wk: Linear::new(rng, &format!("{name}.wk"), dim, dim),
            wv: Linear::new(rng, &format!("{name}.wv"), dim, dim),
            wo: Linear::new(rng, &format!("{name}.wo"), dim, dim),
            heads,
        })
    }

    pub fn forward(&self, x: &TensorBase<E>, ctx: &mut ForwardCtx<E>) -> Result<TensorBase<E>> {
        let dim = self.wq.fan_in();
        let dh = dim / self.heads;
        let q = self.wq.forward(x, ctx)?;
        let k = self.wk.forward(x, ctx)?;
        let v = self.wv.forward(x, ctx)?;
        let scale = E::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
            let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
            let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            let attn = scores.softmax(1)?;
            heads_out.push(attn.matmul(&vh)?);
        }
        let cat = TensorBase::concat_cols(&heads_out)?;
        self.wo.forward(&cat, ctx)
    }

    pub fn params(&self, out: &mut Vec<TensorBase<E>>) {
        self.wq.params(out);
        self.wk.params(out);
        self.wv.params(out);
        self.wo.params(out);
    }

    /// Attention projections by adapter target name.
    pub fn linear_mut(&mut self, target: &str) -> Option<&mut Linear<E>> {
        match target {
            "Wq" => Some(&mut self.wq),
            "Wk" => Some(&mut self.wk),
            "Wv" => Some(&mut self.wv),
            "Wo" => Some(&mut self.wo),
            _ => None,
        }
    }
}

/// Collect named parameter pairs from a flat list, using each tensor's
/// baked-in name.
pub fn named<E: Scalar>(params: &[TensorBase<E>]) -> Vec<(String, TensorBase<E>)> {
    params
        .iter()
        .map(|p| {
            (
                p.name().unwrap_or("<unnamed>").to_string(),
                p.clone(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_forward_shape() {
        let mut rng = RngState::new(1, 0);
        let l = Linear::<f32>::new(&mut rng, "l", 4, 6);
        let x = rng.normal_tensor::<f32>(&[3, 4]);
        let mut ctx = ForwardCtx::inference();
        let y = l.forward(&x, &mut ctx).unwrap();
        assert_eq!(y.shape(), &[3, 6]);
    }

    #[test]
    fn zero_linear_is_zero_map() {
        let l = Linear::<f32>::zeros("z", 4, 2);
        let mut rng = RngState::new(2, 0);
        let x = rng.normal_tensor::<f32>(&[5, 4]);
        let mut ctx = ForwardCtx::inference();
        let y = l.forward(&x, &mut ctx).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_shapes_and_determinism() {
        let mut rng = RngState::new(3, 0);
        let lstm = Lstm::<f32>::new(&mut rng, "lstm", 3, 5);
        let steps: Vec<Tensor> = (0..4)
            .map(|_| rng.normal_tensor::<f32>(&[2, 3]))
            .collect();
        let out1 = lstm.run(&steps).unwrap();
        let out2 = lstm.run(&steps).unwrap();
        assert_eq!(out1.len(), 4);
        assert_eq!(out1[0].shape(), &[2, 5]);
        assert_eq!(out1[3].to_vec(), out2[3].to_vec());
    }

    #[test]
    fn bilstm_zero_proj_outputs_zero() {
        let mut rng = RngState::new(4, 0);
        let bi = BiLstm::<f32>::new(&mut rng, "bi", 3, 4, 3);
        let steps: Vec<Tensor> = (0..3)
            .map(|_| rng.normal_tensor::<f32>(&[2, 3]))
            .collect();
        let mut ctx = ForwardCtx::inference();
        let out = bi.run(&steps, &mut ctx).unwrap();
        assert!(out.iter().all(|t| t.to_vec().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mhsa_shape_preserved() {
        let mut rng = RngState::new(5, 0);
        let attn = Mhsa::<f32>::new(&mut rng, "attn", 8, 2).unwrap();
        let x = rng.normal_tensor::<f32>(&[7, 8]);
        let mut ctx = ForwardCtx::inference();
        let y = attn.forward(&x, &mut ctx).unwrap();
        assert_eq!(y.shape(), &[7, 8]);
    }
}
