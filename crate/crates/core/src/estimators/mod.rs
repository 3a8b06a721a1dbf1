//! Pilot-limited channel estimation: observation model, least-squares
//! variants, SOMP, and the NMSE metric.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{ArrayConfig, ChannelTensor};
use crate::fft::FftPlan;

mod ls;
mod somp;

pub use ls::{beamspace_threshold, ls_dft_denoise, ls_dft_with_threshold, ls_interp, ls_ofdm, zero_padded_ls};
pub use somp::{somp, somp_with_support, SompResult};

/// Noise variance used when the channel carries no energy.
pub const NOISE_FLOOR_VAR: f64 = 1e-30;

/// Lower clamp for reported NMSE.
pub const NMSE_FLOOR_DB: f64 = -300.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("pilot count {count} must lie in 1..={dim}")]
    CountExceedsDimension { count: usize, dim: usize },
    #[error("observation does not fit this estimator: {0}")]
    PatternMismatch(&'static str),
    #[error("at least 2 pilot subcarriers are needed, got {0}")]
    InsufficientPilots(usize),
    #[error("selected dictionary atoms are numerically collinear")]
    DictionaryRankDeficient,
    #[error("reference channel has zero energy")]
    ZeroReference,
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("invalid dictionary grid: {0}")]
    InvalidGrid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotKind {
    /// Pilots on a subset of transmit antennas.
    Antenna,
    /// Pilots on a subset of OFDM subcarriers.
    Subcarrier,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotPattern {
    pub kind: PilotKind,
    /// Size of the sampled axis: `Nt` for antenna pilots, `N_FFT` for subcarriers.
    pub dim: usize,
    pub indices: Vec<usize>,
    pub count: usize,
    pub spacing: usize,
}

/// Uniform pilots `i * max(1, floor(dim / count))`.
pub fn make_pilot_pattern(kind: PilotKind, dim: usize, count: usize) -> Result<PilotPattern, EstimatorError> {
    if count == 0 || count > dim {
        return Err(EstimatorError::CountExceedsDimension { count, dim });
    }
    let spacing = (dim / count).max(1);
    Ok(PilotPattern {
        kind,
        dim,
        indices: (0..count).map(|i| i * spacing).collect(),
        count,
        spacing,
    })
}

/// Noisy channel samples at pilot positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotObservation {
    /// Antenna pilots: `[D, Nr, Np]`. Subcarrier pilots: `[Nr * Nt, |S|]`, stream `r * Nt + t`.
    pub values: Vec<Complex64>,
    pub noise_var: f64,
    pub pattern: PilotPattern,
    pub taps: usize,
    pub nr: usize,
    pub nt: usize,
    /// Set when the channel had no energy and the noise floor was used instead.
    pub noise_only: bool,
}

impl PilotObservation {
    pub fn pilot_count(&self) -> usize {
        self.pattern.indices.len()
    }

    /// Pilot samples of one `(d, r)` row (antenna kind) or one stream (subcarrier kind).
    pub fn row(&self, i: usize) -> &[Complex64] {
        let p = self.pilot_count();
        &self.values[i * p..(i + 1) * p]
    }

    /// Multiplies the samples by `s` and the noise variance by `|s|²`.
    pub fn scaled(&self, s: Complex64) -> Self {
        PilotObservation {
            values: self.values.iter().map(|v| v * s).collect(),
            noise_var: self.noise_var * s.norm_sqr(),
            ..self.clone()
        }
    }

    fn expect_kind(&self, kind: PilotKind) -> Result<(), EstimatorError> {
        if self.pattern.kind != kind {
            return Err(EstimatorError::PatternMismatch(match kind {
                PilotKind::Antenna => "antenna pilots required",
                PilotKind::Subcarrier => "subcarrier pilots required",
            }));
        }
        Ok(())
    }
}

pub(crate) fn complex_gaussian<R: Rng + ?Sized>(rng: &mut R, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Frequency response of every `(r, t)` stream on an `n_fft` grid, `[Nr * Nt, n_fft]`.
pub fn frequency_response(h: &ChannelTensor, n_fft: usize) -> Vec<Complex64> {
    let [taps, nr, nt] = h.shape();
    let plan = FftPlan::new(n_fft);
    let mut out = vec![Complex64::new(0.0, 0.0); nr * nt * n_fft];
    for r in 0..nr {
        for t in 0..nt {
            let row = &mut out[(r * nt + t) * n_fft..(r * nt + t + 1) * n_fft];
            for d in 0..taps.min(n_fft) {
                row[d] = h.get(d, r, t);
            }
            plan.forward(row);
        }
    }
    out
}

/// Samples `h` at the pilots and adds circular complex Gaussian noise.
///
/// The noise variance is set so that the mean power of one observed sample
/// over the full grid divided by `noise_var` equals `10^(snr_db/10)`. For
/// antenna pilots the sample is `h[d, r, t]`; for subcarrier pilots it is the
/// frequency response `H_{r,t}[k]`. `snr_db = +inf` disables noise.
pub fn observe<R: Rng + ?Sized>(
    h: &ChannelTensor,
    pattern: &PilotPattern,
    snr_db: f64,
    rng: &mut R,
) -> Result<PilotObservation, EstimatorError> {
    let [taps, nr, nt] = h.shape();
    let np = pattern.indices.len();
    let (values, mean_power) = match pattern.kind {
        PilotKind::Antenna => {
            if pattern.dim != nt {
                return Err(EstimatorError::PatternMismatch("antenna pattern size differs from Nt"));
            }
            let mut v = Vec::with_capacity(taps * nr * np);
            for d in 0..taps {
                for r in 0..nr {
                    v.extend(pattern.indices.iter().map(|&p| h.get(d, r, p)));
                }
            }
            (v, h.norm_sqr() / h.as_slice().len() as f64)
        }
        PilotKind::Subcarrier => {
            let n_fft = pattern.dim;
            if n_fft < taps {
                return Err(EstimatorError::PatternMismatch("N_FFT smaller than the tap count"));
            }
            let freq = frequency_response(h, n_fft);
            let mut v = Vec::with_capacity(nr * nt * np);
            for s in 0..nr * nt {
                v.extend(pattern.indices.iter().map(|&k| freq[s * n_fft + k]));
            }
            // Parseval: mean |H[k]|² over k equals sum_d |h_d|² for each stream.
            (v, h.norm_sqr() / (nr * nt) as f64)
        }
    };
    let noise_only = !(mean_power > 0.0);
    let noise_var = if snr_db == f64::INFINITY {
        0.0
    } else if noise_only {
        NOISE_FLOOR_VAR
    } else {
        mean_power / 10f64.powf(snr_db / 10.0)
    };
    let mut values = values;
    if noise_var > 0.0 {
        for v in values.iter_mut() {
            *v += complex_gaussian(rng, noise_var);
        }
    }
    Ok(PilotObservation {
        values,
        noise_var,
        pattern: pattern.clone(),
        taps,
        nr,
        nt,
        noise_only,
    })
}

/// `‖Ĥ − H‖² / ‖H‖²` in linear scale.
pub fn nmse_linear(estimate: &ChannelTensor, truth: &ChannelTensor) -> Result<f64, EstimatorError> {
    if estimate.shape() != truth.shape() {
        return Err(EstimatorError::ShapeMismatch(estimate.shape(), truth.shape()));
    }
    let reference = truth.norm_sqr();
    if !(reference > 0.0) {
        return Err(EstimatorError::ZeroReference);
    }
    Ok(estimate
        .distance_sqr(truth)
        .map_err(|_| EstimatorError::ShapeMismatch(estimate.shape(), truth.shape()))?
        / reference)
}

pub fn ratio_to_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        (10.0 * ratio.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    }
}

/// NMSE in dB, clamped below at [`NMSE_FLOOR_DB`].
pub fn nmse_db(estimate: &ChannelTensor, truth: &ChannelTensor) -> Result<f64, EstimatorError> {
    nmse_linear(estimate, truth).map(ratio_to_db)
}

/// Dataset NMSE: mean of the linear ratios, then converted to dB.
pub fn nmse_db_mean<'a, I>(pairs: I) -> Result<f64, EstimatorError>
where
    I: IntoIterator<Item = (&'a ChannelTensor, &'a ChannelTensor)>,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for (est, truth) in pairs {
        sum += nmse_linear(est, truth)?;
        n += 1;
    }
    if n == 0 {
        return Err(EstimatorError::ZeroReference);
    }
    Ok(ratio_to_db(sum / n as f64))
}

/// Selection of an initial estimator, shared by the trainer and the harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Estimator {
    LsInterp,
    LsDft,
    LsOfdm { n_fft: usize },
    Somp { grid_size: usize, max_sparsity: usize },
}

impl Estimator {
    pub fn pilot_kind(&self) -> PilotKind {
        match self {
            Estimator::LsOfdm { .. } => PilotKind::Subcarrier,
            _ => PilotKind::Antenna,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Estimator::LsInterp => "ls_interp",
            Estimator::LsDft => "ls_dft",
            Estimator::LsOfdm { .. } => "ls_ofdm",
            Estimator::Somp { .. } => "somp",
        }
    }

    /// Pilot pattern with `count` pilots on the axis this estimator samples.
    pub fn pilot_pattern(&self, nt: usize, count: usize) -> Result<PilotPattern, EstimatorError> {
        match self {
            Estimator::LsOfdm { n_fft } => make_pilot_pattern(PilotKind::Subcarrier, *n_fft, count),
            _ => make_pilot_pattern(PilotKind::Antenna, nt, count),
        }
    }

    pub fn estimate(&self, obs: &PilotObservation, arr: &ArrayConfig) -> Result<ChannelTensor, EstimatorError> {
        match self {
            Estimator::LsInterp => ls_interp(obs),
            Estimator::LsDft => ls_dft_denoise(obs),
            Estimator::LsOfdm { .. } => ls_ofdm(obs),
            Estimator::Somp {
                grid_size,
                max_sparsity,
            } => somp(obs, arr, *grid_size, *max_sparsity),
        }
    }
}

/// 1-D phase unwrapping: jumps larger than π are folded back by multiples of 2π.
pub fn unwrap_phase(phase: &mut [f64]) {
    let mut correction = 0.0;
    for i in 1..phase.len() {
        let raw = phase[i];
        let d = raw - (phase[i - 1] - correction);
        let wrapped = d + PI;
        let mut dd = wrapped - 2.0 * PI * (wrapped / (2.0 * PI)).floor() - PI;
        if dd == -PI && d > 0.0 {
            dd = PI;
        }
        if d.abs() >= PI {
            correction += dd - d;
        }
        phase[i] = raw + correction;
    }
}

/// Piecewise-linear interpolation through `(xs, ys)` with edge values held outside.
pub fn interp_linear(xs: &[usize], ys: &[f64], x: usize) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let j = xs.partition_point(|&p| p <= x);
    let (x0, x1) = (xs[j - 1], xs[j]);
    let w = (x - x0) as f64 / (x1 - x0) as f64;
    ys[j - 1] + w * (ys[j] - ys[j - 1])
}

/// Fills `out` (length `n`) from pilot samples by interpolating magnitude and
/// unwrapped phase; pilot positions keep their samples exactly.
pub(crate) fn interp_mag_phase(indices: &[usize], samples: &[Complex64], out: &mut [Complex64]) {
    let mag: Vec<f64> = samples.iter().map(|v| v.norm()).collect();
    let mut phase: Vec<f64> = samples.iter().map(|v| v.arg()).collect();
    unwrap_phase(&mut phase);
    let mut next = 0;
    for (k, slot) in out.iter_mut().enumerate() {
        while next < indices.len() && indices[next] < k {
            next += 1;
        }
        *slot = if next < indices.len() && indices[next] == k {
            samples[next]
        } else {
            Complex64::from_polar(interp_linear(indices, &mag, k), interp_linear(indices, &phase, k))
        };
    }
}
