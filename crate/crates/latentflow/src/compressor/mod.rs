//! Variational audio compressor: waveform -> (L, D) latent -> waveform.
//!
//! The encoder embeds the complex STFT per time-frequency unit, applies a
//! stack of dual-path blocks (bidirectional recurrence along frequency,
//! then along time, then full-band self-attention over frames, each with a
//! residual connection and a zero-initialized output projection), and
//! projects each frame to a mean and a softplus variance. The decoder
//! mirrors the encoder and reconstructs via the differentiable inverse
//! STFT, so the spectral reconstruction loss trains the whole stack end to
//! end.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BiLstm, ForwardCtx, Linear};
use crate::signal::diff::{istft_tensor, multires_stft_loss_tensor, stft_tensor};
use crate::signal::{
    stft, SpectrogramConfig, StftLossResolution, Waveform, DEFAULT_RESOLUTIONS,
};
use crate::tensor::{RngState, Scalar, TensorBase};

/// Nonlinearity selector for the embedding/head activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    PRelu,
    Silu,
}

/// Compressor hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompressorConfig {
    /// Latent channels per frame.
    pub latent_dim: usize,
    /// Per-unit embedding width.
    pub embed_dim: usize,
    /// Number of dual-path blocks per codec side.
    pub blocks: usize,
    pub attn_heads: usize,
    /// Query/key channels per attention head.
    pub attn_qk_dim: usize,
    /// Hidden units per direction in the recurrent sub-modules.
    pub lstm_hidden: usize,
    pub kl_weight: f64,
    pub sample_rate: u32,
    pub window_len: usize,
    pub hop: usize,
    pub fft_size: usize,
    pub activation: Activation,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        CompressorConfig {
            latent_dim: 128,
            embed_dim: 128,
            blocks: 3,
            attn_heads: 4,
            attn_qk_dim: 4,
            lstm_hidden: 448,
            kl_weight: 1e-4,
            sample_rate: 8000,
            window_len: 320,
            hop: 160,
            fft_size: 320,
            activation: Activation::PRelu,
        }
    }
}

impl CompressorConfig {
    /// Shrunken configuration for fast desk runs.
    pub fn desk() -> Self {
        CompressorConfig {
            latent_dim: 24,
            embed_dim: 12,
            blocks: 2,
            attn_heads: 2,
            attn_qk_dim: 4,
            lstm_hidden: 16,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.embed_dim == 0 || self.blocks == 0 {
            return Err(Error::Config("compressor dims must be positive".into()));
        }
        if self.embed_dim % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by attn_heads {}",
                self.embed_dim, self.attn_heads
            )));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::Config("kl_weight must be nonnegative".into()));
        }
        SpectrogramConfig::new(self.window_len, self.hop, self.fft_size)?;
        Ok(())
    }

    pub fn stft(&self) -> SpectrogramConfig {
        SpectrogramConfig::new(self.window_len, self.hop, self.fft_size)
            .expect("validated config")
    }

    pub fn freq_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Latent frames per second: `sample_rate / hop`.
    pub fn latent_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    /// Pad to the next hop multiple (at least one hop).
    pub fn pad_to_hop(&self, x: &Waveform) -> Waveform {
        let hop = self.hop;
        let len = x.len().max(1);
        let padded = len.div_ceil(hop) * hop;
        let mut samples = x.samples.clone();
        samples.resize(padded, 0.0);
        Waveform::new(samples, x.sample_rate)
    }
}

/// Frame-wise Gaussian posterior over latents.
pub struct LatentGaussian<E: Scalar = f32> {
    /// `(frames, latent_dim)`.
    pub mu: TensorBase<E>,
    /// `(frames, latent_dim)`, strictly positive.
    pub sigma: TensorBase<E>,
}

impl<E: Scalar> LatentGaussian<E> {
    pub fn frames(&self) -> usize {
        self.mu.rows()
    }
}

/// A `(frames, latent_dim)` latent sequence.
pub struct LatentTensor<E: Scalar = f32> {
    pub values: TensorBase<E>,
}

impl<E: Scalar> LatentTensor<E> {
    pub fn new(values: TensorBase<E>) -> Self {
        LatentTensor { values }
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Draw `z = mu + sigma .* eps` with `eps ~ N(0, I)`; gradients flow into
/// both `mu` and `sigma`.
pub fn reparameterize<E: Scalar>(
    g: &LatentGaussian<E>,
    rng: &mut RngState,
) -> Result<LatentTensor<E>> {
    let eps = rng.normal_tensor::<E>(g.mu.shape());
    let z = g.mu.add(&g.sigma.mul(&eps)?)?;
    Ok(LatentTensor::new(z))
}

/// Closed-form KL(N(mu, sigma^2) || N(0, 1)) summed over elements.
pub fn kl_divergence<E: Scalar>(g: &LatentGaussian<E>) -> Result<TensorBase<E>> {
    let mu2 = g.mu.mul(&g.mu)?;
    let s2 = g.sigma.mul(&g.sigma)?;
    let log_s2 = g.sigma.ln().scale(E::from_f64(2.0));
    let inner = mu2
        .add(&s2)?
        .affine(E::one(), -E::one())
        .sub(&log_s2)?;
    Ok(inner.sum_all().scale(E::from_f64(0.5)))
}

/// One dual-path block: frequency recurrence, time recurrence, full-band
/// frame attention, each residual. Shape-preserving on `(F, T*C)` input.
pub struct TfBlock<E: Scalar> {
    freq_rnn: BiLstm<E>,
    time_rnn: BiLstm<E>,
    attn_q: Vec<Linear<E>>,
    attn_k: Vec<Linear<E>>,
    attn_v: Vec<Linear<E>>,
    attn_out: Linear<E>,
    embed_dim: usize,
    heads: usize,
    qk_dim: usize,
}

impl<E: Scalar> TfBlock<E> {
    fn new(rng: &mut RngState, name: &str, cfg: &CompressorConfig) -> Self {
        let c = cfg.embed_dim;
        let heads = cfg.attn_heads;
        let qk = cfg.attn_qk_dim;
        let cv = c / heads;
        TfBlock {
            freq_rnn: BiLstm::new(rng, &format!("{name}.freq"), c, cfg.lstm_hidden, c),
            time_rnn: BiLstm::new(rng, &format!("{name}.time"), c, cfg.lstm_hidden, c),
            attn_q: (0..heads)
                .map(|h| Linear::new(rng, &format!("{name}.attn.q{h}"), c, qk))
                .collect(),
            attn_k: (0..heads)
                .map(|h| Linear::new(rng, &format!("{name}.attn.k{h}"), c, qk))
                .collect(),
            attn_v: (0..heads)
                .map(|h| Linear::new(rng, &format!("{name}.attn.v{h}"), c, cv))
                .collect(),
            attn_out: Linear::zeros(&format!("{name}.attn.out"), c, c),
            embed_dim: c,
            heads,
            qk_dim: qk,
        }
    }

    /// `x` is `(freq_bins, frames*embed_dim)` in frequency-major order.
    pub fn forward(
        &self,
        x: &TensorBase<E>,
        freq_bins: usize,
        frames: usize,
        ctx: &mut ForwardCtx<E>,
    ) -> Result<TensorBase<E>> {
        let c = self.embed_dim;
        if x.rows() != freq_bins || x.cols() != frames * c {
            return Err(Error::Shape(format!(
                "tf_block: expected ({freq_bins}, {}), got {:?}",
                frames * c,
                x.shape()
            )));
        }

        // Recurrence along frequency: sequence of F steps, batch = frames.
        let steps: Vec<TensorBase<E>> = (0..freq_bins)
            .map(|f| x.slice_rows(f, f + 1)?.reshape(&[frames, c]))
            .collect::<Result<_>>()?;
        let out = self.freq_rnn.run(&steps, ctx)?;
        let rows: Vec<TensorBase<E>> = out
            .into_iter()
            .map(|r| r.reshape(&[1, frames * c]))
            .collect::<Result<_>>()?;
        let x = x.add(&TensorBase::concat_rows(&rows)?)?;

        // Recurrence along time: permute to (T, F*C), sequence of T steps.
        let y = x.permute_swap(freq_bins, frames, c)?;
        let steps: Vec<TensorBase<E>> = (0..frames)
            .map(|t| y.slice_rows(t, t + 1)?.reshape(&[freq_bins, c]))
            .collect::<Result<_>>()?;
        let out = self.time_rnn.run(&steps, ctx)?;
        let rows: Vec<TensorBase<E>> = out
            .into_iter()
            .map(|r| r.reshape(&[1, freq_bins * c]))
            .collect::<Result<_>>()?;
        let y = y.add(&TensorBase::concat_rows(&rows)?)?;
        let x = y.permute_swap(frames, freq_bins, c)?;

        // Full-band self-attention over frames with channelwise q/k/v.
        let units = x.reshape(&[freq_bins * frames, c])?;
        let cv = c / self.heads;
        let scale = E::from_f64(1.0 / ((freq_bins * self.qk_dim) as f64).sqrt());
        let mut head_units = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let to_frames = |m: &TensorBase<E>, width: usize| -> Result<TensorBase<E>> {
                m.reshape(&[freq_bins, frames * width])?
                    .permute_swap(freq_bins, frames, width)
            };
            let q = to_frames(&self.attn_q[h].forward(&units, ctx)?, self.qk_dim)?;
            let k = to_frames(&self.attn_k[h].forward(&units, ctx)?, self.qk_dim)?;
            let v = to_frames(&self.attn_v[h].forward(&units, ctx)?, cv)?;
            let attn = q.matmul(&k.transpose()?)?.scale(scale).softmax(1)?;
            let mixed = attn.matmul(&v)?; // (T, F*cv)
            head_units.push(
                mixed
                    .permute_swap(frames, freq_bins, cv)?
                    .reshape(&[freq_bins * frames, cv])?,
            );
        }
        let mixed_units = TensorBase::concat_cols(&head_units)?;
        let delta = self
            .attn_out
            .forward(&mixed_units, ctx)?
            .reshape(&[freq_bins, frames * c])?;
        x.add(&delta)
    }

    fn params(&self, out: &mut Vec<TensorBase<E>>) {
        self.freq_rnn.params(out);
        self.time_rnn.params(out);
        for l in self.attn_q.iter().chain(&self.attn_k).chain(&self.attn_v) {
            l.params(out);
        }
        self.attn_out.params(out);
    }
}

/// The full compressor.
pub struct Compressor<E: Scalar = f32> {
    pub cfg: CompressorConfig,
    embed: Linear<E>,
    embed_slope: Option<TensorBase<E>>,
    enc_blocks: Vec<TfBlock<E>>,
    pub enc_head: Linear<E>,
    pub dec_head: Linear<E>,
    dec_slope: Option<TensorBase<E>>,
    dec_blocks: Vec<TfBlock<E>>,
    pub out_head: Linear<E>,
}

impl<E: Scalar> Compressor<E> {
    pub fn new(cfg: &CompressorConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let f = cfg.freq_bins();
        let d = cfg.latent_dim;
        let slope = |name: &str| match cfg.activation {
            Activation::PRelu => Some(
                TensorBase::param(name, vec![E::from_f64(0.25)], &[1])
                    .expect("shape consistent"),
            ),
            Activation::Silu => None,
        };
        Ok(Compressor {
            embed: Linear::new(rng, "enc.embed", 2, c),
            embed_slope: slope("enc.embed_slope"),
            enc_blocks: (0..cfg.blocks)
                .map(|i| TfBlock::new(rng, &format!("enc.block{i}"), cfg))
                .collect(),
            enc_head: Linear::new(rng, "enc.head", f * c, 2 * d),
            dec_head: Linear::new(rng, "dec.head", d, f * c),
            dec_slope: slope("dec.head_slope"),
            dec_blocks: (0..cfg.blocks)
                .map(|i| TfBlock::new(rng, &format!("dec.block{i}"), cfg))
                .collect(),
            out_head: Linear::new(rng, "dec.out", c, 2),
            cfg: cfg.clone(),
        })
    }

    fn activate(
        &self,
        x: &TensorBase<E>,
        slope: &Option<TensorBase<E>>,
    ) -> Result<TensorBase<E>> {
        match (self.cfg.activation, slope) {
            (Activation::PRelu, Some(s)) => x.prelu(s),
            _ => Ok(x.silu()),
        }
    }

    /// Encode a hop-multiple waveform into a frame-wise Gaussian.
    pub fn encode(&self, x: &Waveform, ctx: &mut ForwardCtx<E>) -> Result<LatentGaussian<E>> {
        if x.is_empty() || x.len() % self.cfg.hop != 0 {
            return Err(Error::Contract(format!(
                "encode: input length {} is not a positive hop multiple ({})",
                x.len(),
                self.cfg.hop
            )));
        }
        let stft_cfg = self.cfg.stft();
        let spec = stft(x, &stft_cfg)?;
        let f = spec.freq_bins;
        let t = spec.frames;
        let c = self.cfg.embed_dim;
        let d = self.cfg.latent_dim;

        // Unit tokens (F*T, 2): [re, im] per time-frequency cell.
        let mut units = vec![E::zero(); f * t * 2];
        for i in 0..f * t {
            units[2 * i] = E::from_f64(spec.real[i]);
            units[2 * i + 1] = E::from_f64(spec.imag[i]);
        }
        let units = TensorBase::from_vec(units, &[f * t, 2])?;
        let embedded = self.activate(&self.embed.forward(&units, ctx)?, &self.embed_slope)?;
        let mut x = embedded.reshape(&[f, t * c])?;
        for block in &self.enc_blocks {
            x = block.forward(&x, f, t, ctx)?;
        }
        // Frame-major features -> per-frame projection to (mu, raw sigma).
        let frames = x.permute_swap(f, t, c)?; // (T, F*C)
        let head = self.enc_head.forward(&frames, ctx)?;
        let mu = head.slice_cols(0, d)?;
        let sigma = head
            .slice_cols(d, 2 * d)?
            .softplus()
            .affine(E::one(), E::from_f64(1e-6));
        Ok(LatentGaussian { mu, sigma })
    }

    /// In-graph decode of a latent sequence to `out_len` samples.
    pub fn decode_tensor(
        &self,
        z: &LatentTensor<E>,
        out_len: usize,
        ctx: &mut ForwardCtx<E>,
    ) -> Result<TensorBase<E>> {
        let d = self.cfg.latent_dim;
        if z.dim() != d {
            return Err(Error::Shape(format!(
                "decode: latent dim {} does not match config {d}",
                z.dim()
            )));
        }
        let t = z.frames();
        let f = self.cfg.freq_bins();
        let c = self.cfg.embed_dim;
        let frames = self.activate(&self.dec_head.forward(&z.values, ctx)?, &self.dec_slope)?;
        let mut x = frames.permute_swap(t, f, c)?; // (F, T*C)
        for block in &self.dec_blocks {
            x = block.forward(&x, f, t, ctx)?;
        }
        let units = x.reshape(&[f * t, c])?;
        let reim = self.out_head.forward(&units, ctx)?; // (F*T, 2)
        let re = reim.slice_cols(0, 1)?.reshape(&[f, t])?;
        let im = reim.slice_cols(1, 2)?.reshape(&[f, t])?;
        let spec = TensorBase::concat_rows(&[re, im])?;
        istft_tensor(&spec, &self.cfg.stft(), out_len)
    }

    /// Inference decode to a concrete waveform.
    pub fn decode(&self, z: &LatentTensor<E>, out_len: usize) -> Result<Waveform> {
        let mut ctx = ForwardCtx::inference();
        let y = self.decode_tensor(z, out_len, &mut ctx)?;
        Ok(Waveform::new(
            y.to_vec().iter().map(|&v| Scalar::to_f64(v) as f32).collect(),
            self.cfg.sample_rate,
        ))
    }

    /// Deterministic encoder-mean latent of an arbitrary-length waveform
    /// (padded internally).
    pub fn encode_mean(&self, x: &Waveform) -> Result<LatentTensor<E>> {
        let padded = self.cfg.pad_to_hop(x);
        let mut ctx = ForwardCtx::inference();
        let g = self.encode(&padded, &mut ctx)?;
        Ok(LatentTensor::new(g.mu.detach()))
    }

    pub fn params(&self) -> Vec<TensorBase<E>> {
        let mut out = Vec::new();
        self.embed.params(&mut out);
        if let Some(s) = &self.embed_slope {
            out.push(s.clone());
        }
        for b in &self.enc_blocks {
            b.params(&mut out);
        }
        self.enc_head.params(&mut out);
        self.dec_head.params(&mut out);
        if let Some(s) = &self.dec_slope {
            out.push(s.clone());
        }
        for b in &self.dec_blocks {
            b.params(&mut out);
        }
        self.out_head.params(&mut out);
        out
    }

    pub fn named_params(&self) -> Vec<(String, TensorBase<E>)> {
        crate::nn::named(&self.params())
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }
}

/// Loss components of one VAE training example.
pub struct VaeLossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

/// Reconstruction + weighted KL on one clip; returns the scalar graph node
/// and the numeric parts.
pub fn vae_loss<E: Scalar>(
    compressor: &Compressor<E>,
    x: &Waveform,
    resolutions: &[StftLossResolution],
    ctx: &mut ForwardCtx<E>,
) -> Result<(TensorBase<E>, VaeLossParts)> {
    let padded = compressor.cfg.pad_to_hop(x);
    let g = compressor.encode(&padded, ctx)?;
    let z = reparameterize(&g, &mut ctx.rng)?;
    let y = compressor.decode_tensor(&z, padded.len(), ctx)?;
    let recon = multires_stft_loss_tensor(&padded, &y, resolutions)?;
    let kl = kl_divergence(&g)?;
    let total = recon.add(&kl.scale(E::from_f64(compressor.cfg.kl_weight)))?;

    let parts = VaeLossParts {
        total: Scalar::to_f64(total.item()?),
        reconstruction: Scalar::to_f64(recon.item()?),
        kl: Scalar::to_f64(kl.item()?),
    };
    for (value, component) in [
        (parts.reconstruction, "reconstruction"),
        (parts.kl, "kl"),
        (parts.total, "total"),
    ] {
        if !value.is_finite() {
            return Err(Error::Training {
                component: component.into(),
                message: format!("non-finite loss value {value}"),
            });
        }
    }
    Ok((total, parts))
}

/// Default multi-resolution set, re-exported for training code.
pub fn default_resolutions() -> &'static [StftLossResolution] {
    &DEFAULT_RESOLUTIONS
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> CompressorConfig {
        CompressorConfig {
            latent_dim: 6,
            embed_dim: 8,
            blocks: 1,
            attn_heads: 2,
            attn_qk_dim: 2,
            lstm_hidden: 6,
            kl_weight: 1e-4,
            sample_rate: 8000,
            window_len: 32,
            hop: 16,
            fft_size: 32,
            activation: Activation::PRelu,
        }
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = RngState::new(seed, 0);
        Waveform::new(
            (0..len).map(|_| rng.normal_f64() as f32 * 0.3).collect(),
            8000,
        )
    }

    #[test]
    fn latent_rate_is_rate_over_hop() {
        let cfg = CompressorConfig::default();
        assert_eq!(cfg.latent_rate(), 50.0);
        let mut rng = RngState::new(1, 0);
        let comp = Compressor::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        // 1 second at 8 kHz with hop 16 -> 500 frames.
        let x = noise(8000, 2);
        let g = comp
            .encode(&x, &mut ForwardCtx::inference())
            .unwrap();
        assert_eq!(g.frames(), 500);
        // Doubling input length doubles L exactly.
        let x2 = noise(16000, 2);
        let g2 = comp.encode(&x2, &mut ForwardCtx::inference()).unwrap();
        assert_eq!(g2.frames(), 1000);
    }

    #[test]
    fn non_hop_multiple_rejected() {
        let mut rng = RngState::new(3, 0);
        let comp = Compressor::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        let x = noise(100, 4); // hop is 16
        assert!(comp.encode(&x, &mut ForwardCtx::inference()).is_err());
    }

    #[test]
    fn zero_waveform_zero_head_gives_zero_mu() {
        let mut rng = RngState::new(5, 0);
        let comp = Compressor::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        comp.enc_head
            .weight
            .overwrite(&vec![0.0; comp.enc_head.weight.numel()])
            .unwrap();
        let x = Waveform::zeros(160, 8000);
        let g = comp.encode(&x, &mut ForwardCtx::inference()).unwrap();
        assert!(g.mu.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tf_block_shape_preserved_and_identity_at_init() {
        let cfg = tiny_cfg();
        let mut rng = RngState::new(6, 0);
        let block = TfBlock::<f32>::new(&mut rng, "b", &cfg);
        let (f, t, c) = (9, 5, cfg.embed_dim);
        let x = rng.normal_tensor::<f32>(&[f, t * c]);
        let y = block
            .forward(&x, f, t, &mut ForwardCtx::inference())
            .unwrap();
        assert_eq!(y.shape(), x.shape());
        // All sub-module output projections are zero-initialized, so the
        // block is the identity at construction.
        for (a, b) in x.to_vec().iter().zip(y.to_vec()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn tf_block_gradient_check() {
        let cfg = CompressorConfig {
            latent_dim: 4,
            embed_dim: 4,
            blocks: 1,
            attn_heads: 2,
            attn_qk_dim: 2,
            lstm_hidden: 3,
            window_len: 16,
            hop: 8,
            fft_size: 16,
            ..tiny_cfg()
        };
        let mut rng = RngState::new(7, 0);
        let block = TfBlock::<f64>::new(&mut rng, "b", &cfg);
        // Give the zero-init projections random values so their inputs get
        // gradients too.
        let mut params = Vec::new();
        block.params(&mut params);
        for p in &params {
            if p.to_vec().iter().all(|&v| v == 0.0) {
                p.overwrite(&rng.normal_vec::<f64>(p.numel())).unwrap();
            }
        }
        let (f, t, c) = (3, 2, cfg.embed_dim);
        let x = TensorBase::<f64>::param("x", rng.normal_vec(f * t * c), &[f, t * c]).unwrap();
        let target = rng.normal_tensor::<f64>(&[f, t * c]);
        let forward = || {
            let y = block.forward(&x, f, t, &mut ForwardCtx::inference())?;
            y.mse(&target)
        };
        let mut probe = RngState::new(8, 0);
        let mut leaves = vec![x.clone()];
        leaves.extend(params.iter().take(4).cloned());
        crate::gradcheck::check_gradients(
            forward,
            &leaves,
            crate::gradcheck::GradCheckOptions {
                samples_per_tensor: 4,
                ..Default::default()
            },
            &mut probe,
        )
        .unwrap();
    }

    #[test]
    fn reparameterize_limits_and_determinism() {
        let mut rng = RngState::new(9, 0);
        let mu = rng.normal_tensor::<f32>(&[4, 3]);
        // Sigma effectively zero: z = mu.
        let g = LatentGaussian {
            mu: mu.clone(),
            sigma: TensorBase::full(1e-12, &[4, 3]),
        };
        let z = reparameterize(&g, &mut RngState::new(10, 0)).unwrap();
        for (a, b) in z.values.to_vec().iter().zip(mu.to_vec()) {
            assert!((a - b).abs() < 1e-6);
        }
        let g = LatentGaussian {
            mu,
            sigma: TensorBase::full(0.5, &[4, 3]),
        };
        let z1 = reparameterize(&g, &mut RngState::new(11, 2)).unwrap();
        let z2 = reparameterize(&g, &mut RngState::new(11, 2)).unwrap();
        assert_eq!(z1.values.to_vec(), z2.values.to_vec());
    }

    #[test]
    fn reparameterize_moments() {
        let mu = TensorBase::full(0.7f32, &[1, 1]);
        let sigma = TensorBase::full(0.3f32, &[1, 1]);
        let g = LatentGaussian { mu, sigma };
        let mut rng = RngState::new(12, 0);
        let n = 10_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| reparameterize(&g, &mut rng).unwrap().values.to_vec()[0] as f64)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        // 3-sigma bands for the Monte Carlo estimates.
        assert!((mean - 0.7).abs() < 3.0 * 0.3 / (n as f64).sqrt());
        assert!((var - 0.09).abs() < 3.0 * 0.09 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn kl_trivial_values() {
        let g = LatentGaussian {
            mu: TensorBase::zeros(&[2, 3]),
            sigma: TensorBase::ones(&[2, 3]),
        };
        assert!(kl_divergence::<f32>(&g).unwrap().item().unwrap().abs() < 1e-7);
        let g = LatentGaussian {
            mu: TensorBase::ones(&[1, 1]),
            sigma: TensorBase::ones(&[1, 1]),
        };
        let kl = kl_divergence::<f32>(&g).unwrap().item().unwrap();
        assert!((kl - 0.5).abs() < 1e-7);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // KL(N(mu, s^2) || N(0,1)) estimated as E_z[ln q(z) - ln p(z)]
        // with antithetic pairs (w, -w) to reduce estimator variance.
        let mut rng = RngState::new(13, 0);
        for trial in 0..10 {
            let mu = rng.uniform_range(0.5, 1.5) * if trial % 2 == 0 { 1.0 } else { -1.0 };
            let s = rng.uniform_range(0.4, 1.8);
            let g = LatentGaussian {
                mu: TensorBase::full(mu as f32, &[1, 1]),
                sigma: TensorBase::full(s as f32, &[1, 1]),
            };
            let closed = kl_divergence::<f32>(&g).unwrap().item().unwrap() as f64;
            let n = 100_000;
            let mut acc = 0.0f64;
            for _ in 0..n / 2 {
                let w = rng.normal_f64();
                for w in [w, -w] {
                    let z = mu + s * w;
                    let ln_q = -0.5 * w * w - s.ln();
                    let ln_p = -0.5 * z * z;
                    acc += ln_q - ln_p;
                }
            }
            let mc = acc / n as f64;
            assert!(
                (closed - mc).abs() < 0.02 * closed.abs(),
                "trial {trial}: closed {closed} mc {mc}"
            );
        }
    }

    #[test]
    fn decode_zero_latent_zero_head_gives_zero_waveform() {
        let mut rng = RngState::new(14, 0);
        let comp = Compressor::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        comp.out_head
            .weight
            .overwrite(&vec![0.0; comp.out_head.weight.numel()])
            .unwrap();
        comp.out_head
            .bias
            .as_ref()
            .unwrap()
            .overwrite(&vec![0.0; 2])
            .unwrap();
        let z = LatentTensor::new(TensorBase::zeros(&[10, 6]));
        let y = comp.decode(&z, 150).unwrap();
        assert_eq!(y.len(), 150);
        assert!(y.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_length_contract() {
        let mut rng = RngState::new(15, 0);
        let comp = Compressor::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        let z = LatentTensor::new(rng.normal_tensor::<f32>(&[10, 6]));
        for len in [1usize, 100, 160] {
            assert_eq!(comp.decode(&z, len).unwrap().len(), len);
        }
        // 10 frames at hop 16 cover at most 160 samples.
        assert!(comp.decode(&z, 161).is_err());
    }

    #[test]
    fn vae_loss_parts_bookkeeping() {
        let mut rng = RngState::new(16, 0);
        let comp = Compressor::<f32>::new(&tiny_cfg(), &mut rng).unwrap();
        let x = noise(320, 17);
        let res = [StftLossResolution {
            window_len: 64,
            hop: 16,
        }];
        let mut ctx = ForwardCtx::training(RngState::new(18, 0));
        let (_, parts) = vae_loss(&comp, &x, &res, &mut ctx).unwrap();
        let recombined = parts.reconstruction + 1e-4 * parts.kl;
        assert!((parts.total - recombined).abs() < 1e-6);
    }
}
