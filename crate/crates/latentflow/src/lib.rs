//! Latent flow-matching speech enhancement, desk scale.
//!
//! The crate wires together everything needed to train and run a latent
//! flow-matching enhancer end to end on toy corpora:
//!
//! - [`tensor`]: a small reverse-mode autodiff engine (f32 model state,
//!   f64 shadow path for gradient checks), seeded randomness, AdamW.
//! - [`signal`]: STFT/iSTFT, multi-resolution spectral loss, log-spectral
//!   distance, WAV I/O and resampling.
//! - [`compressor`]: the variational audio compressor mapping waveforms to
//!   latent sequences and back.
//! - [`udit`]: the skip-connected diffusion-transformer velocity network.
//! - [`flow`]: conditional flow-matching training and ODE inference.
//! - [`adapters`]: LoRA experts, noisy top-k routing, mixture-of-LoRA
//!   adaptation with frozen backbones and additive expert extension.
//! - [`distort`]: seeded reverberation/noise/codec/clipping/bandwidth/
//!   packet-loss pipeline.
//! - [`dataset`]: synthetic corpus generation with fixed-position room
//!   impulse responses and reproducible manifests.
//! - [`eval`]: metrics, real-time-factor measurement and reports.
//! - [`pipeline`]: the operations behind the `latentflow` CLI.
//!
//! See the `examples/` directory for one runnable example per capability,
//! and the README for the CLI walkthrough.

pub mod adapters;
pub mod checkpoint;
pub mod compressor;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod signal;
pub mod tensor;
pub mod udit;

pub use error::{Error, Result};
pub use tensor::{Tensor, TensorBase};

/// Crate version string embedded into artifacts.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
