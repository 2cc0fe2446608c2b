//! Velocity-prediction backbone: transformer blocks with time-conditioned
//! modulation and long skip connections bridging shallow and deep blocks.
//!
//! Block `i` pairs with block `layers-1-i` for `i < layers/2`; each deep
//! block fuses its predecessor's output with the paired shallow output
//! through a concat-then-linear projection. Modulation follows the
//! zero-initialized scale/shift/gate scheme, so a fresh block is the
//! identity map, and the output projection starts at zero so the initial
//! velocity field is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Linear, Mhsa};
use crate::tensor::{RngState, Scalar, TensorBase};

/// Backbone hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UditConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Latent channels D; the conditioned input carries 2D channels.
    pub latent_dim: usize,
    /// Sinusoidal feature count fed to the time projection.
    pub time_features: usize,
    /// Positional-embedding table length; longer inputs interpolate it.
    pub max_len: usize,
}

impl Default for UditConfig {
    fn default() -> Self {
        UditConfig {
            layers: 12,
            embed_dim: 384,
            heads: 6,
            mlp_ratio: 4.0,
            latent_dim: 128,
            time_features: 256,
            max_len: 1024,
        }
    }
}

impl UditConfig {
    /// Shrunken configuration for fast desk runs.
    pub fn desk(latent_dim: usize) -> Self {
        UditConfig {
            layers: 4,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 2.0,
            latent_dim,
            time_features: 32,
            max_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.latent_dim == 0 {
            return Err(Error::Config("layers and latent_dim must be positive".into()));
        }
        Ok(())
    }

    /// Skip pairs (shallow, deep) with deep = layers-1-shallow.
    pub fn skip_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.layers / 2)
            .map(|i| (i, self.layers - 1 - i))
            .collect()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// A conditioning vector derived deterministically from the flow time.
pub struct TimeEmbedding<E: Scalar> {
    pub t: f64,
    pub vector: TensorBase<E>,
}

/// Two-layer projection of sinusoidal time features.
pub struct TimeEmbedder<E: Scalar> {
    lin1: Linear<E>,
    lin2: Linear<E>,
    features: usize,
}

impl<E: Scalar> TimeEmbedder<E> {
    fn new(rng: &mut RngState, name: &str, features: usize, embed_dim: usize) -> Self {
        TimeEmbedder {
            lin1: Linear::new(rng, &format!("{name}.lin1"), features, embed_dim),
            lin2: Linear::new(rng, &format!("{name}.lin2"), embed_dim, embed_dim),
            features,
        }
    }

    /// Sinusoidal features of `t` in [0,1] through the projection.
    pub fn embed(&self, t: f64, ctx: &mut ForwardCtx<E>) -> Result<TimeEmbedding<E>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Contract(format!(
                "time_embed: t must lie in [0, 1], got {t}"
            )));
        }
        let half = self.features / 2;
        let mut feats = vec![E::zero(); self.features];
        for j in 0..half {
            let freq = (-(10_000f64.ln()) * j as f64 / half as f64).exp();
            let arg = t * 1000.0 * freq;
            feats[j] = E::from_f64(arg.sin());
            feats[half + j] = E::from_f64(arg.cos());
        }
        let row = TensorBase::from_vec(feats, &[1, self.features])?;
        let vector = self
            .lin2
            .forward(&self.lin1.forward(&row, ctx)?.silu(), ctx)?;
        Ok(TimeEmbedding { t, vector })
    }

    fn params(&self, out: &mut Vec<TensorBase<E>>) {
        self.lin1.params(out);
        self.lin2.params(out);
    }
}

/// Pre-norm transformer block with time-modulated attention and MLP paths.
pub struct DitBlock<E: Scalar> {
    pub attn: Mhsa<E>,
    pub mlp_in: Linear<E>,
    pub mlp_out: Linear<E>,
    /// Produces (shift, scale, gate) twice from the time embedding;
    /// zero-initialized so the block starts as the identity.
    pub modulation: Linear<E>,
    embed_dim: usize,
}

impl<E: Scalar> DitBlock<E> {
    fn new(rng: &mut RngState, name: &str, cfg: &UditConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        Ok(DitBlock {
            attn: Mhsa::new(rng, &format!("{name}.attn"), d, cfg.heads)?,
            mlp_in: Linear::new(rng, &format!("{name}.mlp_in"), d, cfg.mlp_hidden()),
            mlp_out: Linear::new(rng, &format!("{name}.mlp_out"), cfg.mlp_hidden(), d),
            modulation: Linear::zeros(&format!("{name}.modulation"), d, 6 * d),
            embed_dim: d,
        })
    }

    fn norm(&self, x: &TensorBase<E>) -> Result<TensorBase<E>> {
        let d = self.embed_dim;
        x.layer_norm(&TensorBase::ones(&[d]), &TensorBase::zeros(&[d]), E::from_f64(1e-5))
    }

    /// `x + gate1 * MHSA(modulate(norm(x))) + gate2 * MLP(modulate(norm(.)))`.
    pub fn forward(
        &self,
        x: &TensorBase<E>,
        te: &TimeEmbedding<E>,
        ctx: &mut ForwardCtx<E>,
    ) -> Result<TensorBase<E>> {
        let d = self.embed_dim;
        if x.cols() != d {
            return Err(Error::Shape(format!(
                "dit_block: expected {} channels, got {:?}",
                d,
                x.shape()
            )));
        }
        let mods = self.modulation.forward(&te.vector.silu(), ctx)?;
        let chunk = |i: usize| -> Result<TensorBase<E>> {
            Ok(mods.slice_cols(i * d, (i + 1) * d)?.reshape(&[d])?)
        };
        let (shift1, scale1, gate1) = (chunk(0)?, chunk(1)?, chunk(2)?);
        let (shift2, scale2, gate2) = (chunk(3)?, chunk(4)?, chunk(5)?);

        let modulate = |h: &TensorBase<E>, scale: &TensorBase<E>, shift: &TensorBase<E>| {
            h.mul_rowvec(&scale.affine(E::one(), E::one()))?
                .add_rowvec(shift)
        };

        let attn_in = modulate(&self.norm(x)?, &scale1, &shift1)?;
        let attn_out = self.attn.forward(&attn_in, ctx)?.mul_rowvec(&gate1)?;
        let h = x.add(&attn_out)?;

        let mlp_in = modulate(&self.norm(&h)?, &scale2, &shift2)?;
        let mlp_out = self
            .mlp_out
            .forward(&self.mlp_in.forward(&mlp_in, ctx)?.silu(), ctx)?
            .mul_rowvec(&gate2)?;
        h.add(&mlp_out)
    }

    fn params(&self, out: &mut Vec<TensorBase<E>>) {
        self.attn.params(out);
        self.mlp_in.params(out);
        self.mlp_out.params(out);
        self.modulation.params(out);
    }

    /// Adapter site lookup by target name.
    pub(crate) fn adapter_site(&mut self, target: &str) -> Option<&mut Linear<E>> {
        match target {
            "mlp_in" => Some(&mut self.mlp_in),
            "mlp_out" => Some(&mut self.mlp_out),
            other => self.attn.linear_mut(other),
        }
    }
}

/// The full velocity network.
pub struct UditModel<E: Scalar> {
    pub cfg: UditConfig,
    pub input_proj: Linear<E>,
    pub pos_emb: TensorBase<E>,
    time: TimeEmbedder<E>,
    pub blocks: Vec<DitBlock<E>>,
    /// One fusion layer per deep block, indexed by skip-pair order.
    pub fuses: Vec<Linear<E>>,
    pub output_proj: Linear<E>,
}

impl<E: Scalar> UditModel<E> {
    pub fn new(cfg: &UditConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let blocks = (0..cfg.layers)
            .map(|i| DitBlock::new(rng, &format!("blocks.{i}"), cfg))
            .collect::<Result<Vec<_>>>()?;
        let fuses = (0..cfg.layers / 2)
            .map(|i| Linear::new(rng, &format!("fuses.{i}"), 2 * d, d))
            .collect();
        let pos_data = (0..cfg.max_len * d)
            .map(|_| E::from_f64(rng.normal_f64() * 0.02))
            .collect();
        Ok(UditModel {
            input_proj: Linear::new(rng, "input_proj", 2 * cfg.latent_dim, d),
            pos_emb: TensorBase::param("pos_emb", pos_data, &[cfg.max_len, d])?,
            time: TimeEmbedder::new(rng, "time", cfg.time_features, d),
            blocks,
            fuses,
            output_proj: Linear::zeros("output_proj", d, cfg.latent_dim),
            cfg: cfg.clone(),
        })
    }

    /// Deterministic time embedding (exposed for conditioning tests).
    pub fn time_embed(&self, t: f64, ctx: &mut ForwardCtx<E>) -> Result<TimeEmbedding<E>> {
        self.time.embed(t, ctx)
    }

    /// Positional rows for a sequence of length `len`, linearly
    /// interpolating the table when `len` exceeds it.
    fn positions(&self, len: usize) -> Result<TensorBase<E>> {
        let max_len = self.cfg.max_len;
        if len <= max_len {
            return self.pos_emb.slice_rows(0, len);
        }
        let mut interp = vec![E::zero(); len * max_len];
        for i in 0..len {
            let u = i as f64 * (max_len - 1) as f64 / (len - 1) as f64;
            let lo = u.floor() as usize;
            let hi = (lo + 1).min(max_len - 1);
            let frac = u - lo as f64;
            interp[i * max_len + lo] += E::from_f64(1.0 - frac);
            interp[i * max_len + hi] += E::from_f64(frac);
        }
        TensorBase::from_vec(interp, &[len, max_len])?.matmul(&self.pos_emb)
    }

    /// Map a channel-concatenated `(L, 2D)` conditioned latent and a flow
    /// time to a `(L, D)` velocity.
    pub fn forward(
        &self,
        z_cond: &TensorBase<E>,
        t: f64,
        ctx: &mut ForwardCtx<E>,
    ) -> Result<TensorBase<E>> {
        let two_d = 2 * self.cfg.latent_dim;
        if z_cond.shape().len() != 2 || z_cond.cols() != two_d {
            return Err(Error::Shape(format!(
                "udit_forward: expected (L, {two_d}) input, got {:?}",
                z_cond.shape()
            )));
        }
        let len = z_cond.rows();
        let te = self.time.embed(t, ctx)?;
        let mut x = self
            .input_proj
            .forward(z_cond, ctx)?
            .add(&self.positions(len)?)?;

        let half = self.cfg.layers / 2;
        let mut skip_outputs: Vec<TensorBase<E>> = Vec::with_capacity(half);
        for (i, block) in self.blocks.iter().enumerate() {
            if i >= self.cfg.layers - half {
                // Deep block: fuse predecessor output with the paired
                // shallow output (pair index counts from the deepest).
                let pair = self.cfg.layers - 1 - i;
                let fuse = &self.fuses[pair];
                let cat = TensorBase::concat_cols(&[x.clone(), skip_outputs[pair].clone()])?;
                x = fuse.forward(&cat, ctx)?;
            }
            x = block.forward(&x, &te, ctx)?;
            if i < half {
                skip_outputs.push(x.clone());
            }
        }
        self.output_proj.forward(&x, ctx)
    }

    /// Backbone parameters (adapter banks excluded).
    pub fn params(&self) -> Vec<TensorBase<E>> {
        let mut out = Vec::new();
        self.input_proj.params(&mut out);
        out.push(self.pos_emb.clone());
        self.time.params(&mut out);
        for b in &self.blocks {
            b.params(&mut out);
        }
        for f in &self.fuses {
            f.params(&mut out);
        }
        self.output_proj.params(&mut out);
        out
    }

    pub fn named_params(&self) -> Vec<(String, TensorBase<E>)> {
        crate::nn::named(&self.params())
    }

    /// Adapter parameters across all attached banks, if any.
    pub fn adapter_params(&self) -> Vec<TensorBase<E>> {
        let mut out = Vec::new();
        for site in self.adapter_sites_ref() {
            if let Some(bank) = &site.bank {
                bank.params(&mut out);
            }
        }
        out
    }

    pub fn freeze_backbone(&self) {
        for p in self.params() {
            p.set_requires_grad(false);
        }
    }

    pub fn unfreeze_backbone(&self) {
        for p in self.params() {
            p.set_requires_grad(true);
        }
    }

    pub(crate) fn adapter_sites_ref(&self) -> Vec<&Linear<E>> {
        let mut sites = Vec::new();
        for b in &self.blocks {
            sites.push(&b.attn.wq);
            sites.push(&b.attn.wk);
            sites.push(&b.attn.wv);
            sites.push(&b.attn.wo);
            sites.push(&b.mlp_in);
            sites.push(&b.mlp_out);
        }
        sites
    }

    pub(crate) fn adapter_banks_mut(
        &mut self,
    ) -> Vec<&mut Option<crate::adapters::AdapterBank<E>>> {
        let mut banks = Vec::new();
        for b in &mut self.blocks {
            banks.push(&mut b.attn.wq.bank);
            banks.push(&mut b.attn.wk.bank);
            banks.push(&mut b.attn.wv.bank);
            banks.push(&mut b.attn.wo.bank);
            banks.push(&mut b.mlp_in.bank);
            banks.push(&mut b.mlp_out.bank);
        }
        banks
    }

    pub fn has_adapters(&self) -> bool {
        self.adapter_sites_ref().iter().any(|l| l.bank.is_some())
    }
}
