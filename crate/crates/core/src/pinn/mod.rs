//! Physics-informed channel refinement network.
//!
//! A residual U-Net encodes the initial channel estimate, a small CNN encodes
//! the RSS crop around the receiver, cross-attention lets every channel token
//! query the environment features, a transformer mixes the tokens, and the
//! decoder emits `L` channel snapshots. Training minimizes NMSE plus a
//! power-consistency penalty tying the predicted channel power to the RSS map.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor};
use crate::channel::ChannelTensor;
use crate::Complex64;

#[cfg(not(feature = "std"))]
use num_traits::Float;

mod loss;
mod model;
mod train;

pub use loss::{calibrate_kappa, loss_total, nmse_terms, PhysicsBatch};
pub use model::{
    cross_attention, decode, encode_channel, encode_rss, encode_rss_stages, forward, init_params, multi_head_attention,
    transformer_latent, EncoderOutput, ModelParams, Net,
};
pub use train::{infer, infer_batch, lr_at_epoch, train, Adam, EpochRecord, TrainOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PinnError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("latent dimension {dim} is not divisible by {heads} heads")]
    HeadDivisibility { dim: usize, heads: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("reference channel has zero energy")]
    ZeroReference,
    #[error("parameter {0} is missing from the store")]
    MissingParam(alloc::string::String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Where the RSS power for the physics term is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RssPowerSource {
    CenterPixel,
    CropMean,
}

/// Network topology. Everything in [`ModelParams`] is derived from this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PinnConfig {
    pub d_taps: usize,
    pub nr: usize,
    pub nt: usize,
    /// Output channels of the three encoder stages.
    pub base_channels: [usize; 3],
    /// Width of the last decoder stage, fed to the 1x1 output head.
    pub head_channels: usize,
    /// Channels of the four RSS-encoder convolutions.
    pub rss_channels: [usize; 4],
    pub latent_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub crop_px: usize,
    pub multi_step: usize,
    pub zeta: f64,
    pub rss_power_source: RssPowerSource,
}

impl PinnConfig {
    /// The full-size network: `32x4x576` input, `256x1x72` latent.
    pub fn paper_scale() -> Self {
        PinnConfig {
            d_taps: 16,
            nr: 4,
            nt: 576,
            base_channels: [64, 128, 256],
            head_channels: 32,
            rss_channels: [32, 64, 128, 256],
            latent_dim: 256,
            num_blocks: 2,
            num_heads: 4,
            ff_dim: 1024,
            crop_px: 30,
            multi_step: 1,
            zeta: 0.01,
            rss_power_source: RssPowerSource::CenterPixel,
        }
    }

    /// Same topology at CPU-friendly size: D=4, 2x2 receive, 8x8 transmit.
    pub fn desk_scale() -> Self {
        PinnConfig {
            d_taps: 4,
            nr: 4,
            nt: 64,
            base_channels: [16, 32, 64],
            head_channels: 16,
            rss_channels: [8, 16, 32, 64],
            latent_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            ff_dim: 256,
            crop_px: 12,
            multi_step: 1,
            zeta: 0.01,
            rss_power_source: RssPowerSource::CenterPixel,
        }
    }

    pub fn with_multi_step(mut self, l: usize) -> Self {
        self.multi_step = l;
        self
    }

    pub fn with_zeta(mut self, zeta: f64) -> Self {
        self.zeta = zeta;
        self
    }

    /// Real input planes: re/im of every tap.
    pub fn in_channels(&self) -> usize {
        2 * self.d_taps
    }

    pub fn validate(&self) -> Result<(), PinnError> {
        if self.d_taps == 0 || self.nr == 0 || self.nt == 0 {
            return Err(PinnError::InvalidConfig("channel dimensions must be positive"));
        }
        if self.base_channels.iter().chain(&self.rss_channels).any(|&c| c == 0) || self.head_channels == 0 {
            return Err(PinnError::InvalidConfig("channel widths must be positive"));
        }
        if self.latent_dim == 0 || self.ff_dim == 0 || self.num_heads == 0 {
            return Err(PinnError::InvalidConfig("transformer widths must be positive"));
        }
        if !self.latent_dim.is_multiple_of(self.num_heads) {
            return Err(PinnError::HeadDivisibility {
                dim: self.latent_dim,
                heads: self.num_heads,
            });
        }
        if self.crop_px == 0 || self.multi_step == 0 {
            return Err(PinnError::InvalidConfig("crop size and step count must be positive"));
        }
        if !(self.zeta >= 0.0) || !self.zeta.is_finite() {
            return Err(PinnError::InvalidConfig("zeta must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub batch_size: usize,
    pub epochs: usize,
    pub init_lr: f64,
    /// Epochs between learning-rate decays.
    pub step_size: usize,
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Transmit power used to turn channel energy into watts.
    pub tx_power_w: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            batch_size: 32,
            epochs: 100,
            init_lr: 1e-3,
            step_size: 40,
            gamma: 0.65,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            tx_power_w: 1.0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), PinnError> {
        if self.batch_size == 0 || self.step_size == 0 {
            return Err(PinnError::InvalidConfig("batch size and decay step must be positive"));
        }
        if !(self.init_lr > 0.0) || !(self.tx_power_w > 0.0) {
            return Err(PinnError::InvalidConfig(
                "learning rate and transmit power must be positive",
            ));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(PinnError::InvalidConfig("gamma must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(PinnError::InvalidConfig("Adam moments must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct PinnSample {
    pub h_init: ChannelTensor,
    /// `L` target snapshots; the first is the current channel.
    pub targets: Vec<ChannelTensor>,
    /// Normalized RSS crop, row-major `crop_px x crop_px`.
    pub crop: Vec<f64>,
    /// RSS power in watts at the (noisy) crop center.
    pub rss_power_w: f64,
}

/// Per-sample input scale: RMS magnitude of the initial estimate.
pub fn input_scale(h: &ChannelTensor) -> Result<f64, PinnError> {
    let n = h.as_slice().len();
    let rms = (h.norm_sqr() / n.max(1) as f64).sqrt();
    if rms > 0.0 && rms.is_finite() {
        Ok(rms)
    } else {
        Err(PinnError::ZeroReference)
    }
}

/// `[D, Nr, Nt]` complex to `[2D, Nr, Nt]` real planes (re, im per tap), divided by `scale`.
pub fn to_planes(h: &ChannelTensor, scale: f64) -> Vec<f64> {
    let [d, nr, nt] = h.shape();
    let plane = nr * nt;
    let mut out = alloc::vec![0.0; 2 * d * plane];
    for tap in 0..d {
        let src = &h.as_slice()[tap * plane..(tap + 1) * plane];
        for (i, v) in src.iter().enumerate() {
            out[2 * tap * plane + i] = v.re / scale;
            out[(2 * tap + 1) * plane + i] = v.im / scale;
        }
    }
    out
}

/// Inverse of [`to_planes`].
pub fn from_planes(planes: &[f64], d: usize, nr: usize, nt: usize, scale: f64) -> ChannelTensor {
    let plane = nr * nt;
    let mut data = Vec::with_capacity(d * plane);
    for tap in 0..d {
        for i in 0..plane {
            data.push(Complex64::new(planes[2 * tap * plane + i], planes[(2 * tap + 1) * plane + i]) * scale);
        }
    }
    ChannelTensor::from_vec(d, nr, nt, data)
}

/// Stacks samples into the network input `[N, 2D, Nr, Nt]` and crop batch
/// `[N, 1, c, c]`; returns the per-sample scales as well.
pub fn batch_inputs(cfg: &PinnConfig, samples: &[&PinnSample]) -> Result<(Tensor, Tensor, Vec<f64>), PinnError> {
    let n = samples.len();
    let mut x = Vec::with_capacity(n * cfg.in_channels() * cfg.nr * cfg.nt);
    let mut crops = Vec::with_capacity(n * cfg.crop_px * cfg.crop_px);
    let mut scales = Vec::with_capacity(n);
    for s in samples {
        check_channel(cfg, &s.h_init)?;
        if s.crop.len() != cfg.crop_px * cfg.crop_px {
            return Err(PinnError::ShapeMismatch {
                expected: alloc::vec![cfg.crop_px, cfg.crop_px],
                got: alloc::vec![s.crop.len()],
            });
        }
        let scale = input_scale(&s.h_init)?;
        x.extend(to_planes(&s.h_init, scale));
        crops.extend_from_slice(&s.crop);
        scales.push(scale);
    }
    Ok((
        Tensor::new(&[n, cfg.in_channels(), cfg.nr, cfg.nt], x),
        Tensor::new(&[n, 1, cfg.crop_px, cfg.crop_px], crops),
        scales,
    ))
}

pub(crate) fn check_channel(cfg: &PinnConfig, h: &ChannelTensor) -> Result<(), PinnError> {
    let expected = [cfg.d_taps, cfg.nr, cfg.nt];
    if h.shape() != expected {
        return Err(PinnError::ShapeMismatch {
            expected: expected.to_vec(),
            got: h.shape().to_vec(),
        });
    }
    Ok(())
}
