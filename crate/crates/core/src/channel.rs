//! Wideband URA-to-URA multipath channels.
//!
//! A channel is a `[D, Nr, Nt]` complex tensor. Tap `d` is the sum over paths
//! of `gain * pulse(d*Ts - (delay - t_off)) * a_r a_t^T`, where the array
//! responses are Kronecker products of half-wavelength steering vectors.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::{ETA0, SPEED_OF_LIGHT};

/// Pulse tails this many samples outside the tap window are still accepted.
pub const DELAY_MARGIN_TAPS: f64 = 4.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("path {index} has shifted delay {shifted_delay_s:e} s outside the tap window")]
    PathDelayOutOfRange { index: usize, shifted_delay_s: f64 },
    #[error("transmit power must be positive, got {0}")]
    NonPositivePower(f64),
    #[error("array dimensions must be positive")]
    InvalidArray,
    #[error("invalid waveform: {0}")]
    InvalidWaveform(&'static str),
    #[error("tensor shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
}

/// Transmit and receive uniform rectangular arrays, half-wavelength spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub nt_x: usize,
    pub nt_y: usize,
    pub nr_x: usize,
    pub nr_y: usize,
}

impl ArrayConfig {
    pub fn new(nt_x: usize, nt_y: usize, nr_x: usize, nr_y: usize) -> Result<Self, ChannelError> {
        let cfg = ArrayConfig { nt_x, nt_y, nr_x, nr_y };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.nt_x == 0 || self.nt_y == 0 || self.nr_x == 0 || self.nr_y == 0 {
            return Err(ChannelError::InvalidArray);
        }
        Ok(())
    }

    pub fn nt(&self) -> usize {
        self.nt_x * self.nt_y
    }

    pub fn nr(&self) -> usize {
        self.nr_x * self.nr_y
    }
}

/// One propagation path between transmitter and receiver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Path {
    /// Complex amplitude, linear and dimensionless.
    pub gain: Complex64,
    /// Time of arrival in seconds.
    pub delay_s: f64,
    pub aoa_az: f64,
    pub aoa_el: f64,
    pub aod_az: f64,
    pub aod_el: f64,
}

pub type PathSet = Vec<Path>;

/// Sampling and RF parameters shared by channel synthesis and power models.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveformConfig {
    pub sample_interval_s: f64,
    #[serde(default)]
    pub clock_offset_s: f64,
    pub rolloff: f64,
    pub num_taps: usize,
    pub carrier_hz: f64,
    pub tx_power_w: f64,
}

impl WaveformConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if !(self.sample_interval_s > 0.0) {
            return Err(ChannelError::InvalidWaveform("sample interval must be positive"));
        }
        if self.num_taps == 0 {
            return Err(ChannelError::InvalidWaveform("at least one tap is required"));
        }
        if !(0.0..=1.0).contains(&self.rolloff) {
            return Err(ChannelError::InvalidWaveform("rolloff must lie in [0, 1]"));
        }
        if !(self.carrier_hz > 0.0) {
            return Err(ChannelError::InvalidWaveform("carrier must be positive"));
        }
        if !(self.tx_power_w > 0.0) {
            return Err(ChannelError::NonPositivePower(self.tx_power_w));
        }
        Ok(())
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn bandwidth_hz(&self) -> f64 {
        1.0 / self.sample_interval_s
    }
}

/// Dense `[D, Nr, Nt]` complex tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTensor {
    taps: usize,
    nr: usize,
    nt: usize,
    data: Vec<Complex64>,
}

impl ChannelTensor {
    pub fn zeros(taps: usize, nr: usize, nt: usize) -> Self {
        ChannelTensor {
            taps,
            nr,
            nt,
            data: vec![Complex64::new(0.0, 0.0); taps * nr * nt],
        }
    }

    pub fn from_vec(taps: usize, nr: usize, nt: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), taps * nr * nt, "data length does not match shape");
        ChannelTensor { taps, nr, nt, data }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.taps, self.nr, self.nt]
    }

    pub fn taps(&self) -> usize {
        self.taps
    }

    pub fn nr(&self) -> usize {
        self.nr
    }

    pub fn nt(&self) -> usize {
        self.nt
    }

    #[inline]
    pub fn index(&self, d: usize, r: usize, t: usize) -> usize {
        (d * self.nr + r) * self.nt + t
    }

    #[inline]
    pub fn get(&self, d: usize, r: usize, t: usize) -> Complex64 {
        self.data[self.index(d, r, t)]
    }

    #[inline]
    pub fn set(&mut self, d: usize, r: usize, t: usize, v: Complex64) {
        let i = self.index(d, r, t);
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.data
    }

    /// The `Nt` transmit-side row for tap `d`, receive antenna `r`.
    pub fn row(&self, d: usize, r: usize) -> &[Complex64] {
        let start = self.index(d, r, 0);
        &self.data[start..start + self.nt]
    }

    pub fn row_mut(&mut self, d: usize, r: usize) -> &mut [Complex64] {
        let start = self.index(d, r, 0);
        &mut self.data[start..start + self.nt]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn scaled(&self, s: Complex64) -> Self {
        ChannelTensor {
            data: self.data.iter().map(|v| v * s).collect(),
            ..self.clone()
        }
    }

    pub fn conj(&self) -> Self {
        ChannelTensor {
            data: self.data.iter().map(|v| v.conj()).collect(),
            ..self.clone()
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, ChannelError> {
        self.check_shape(other)?;
        Ok(ChannelTensor {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            ..self.clone()
        })
    }

    /// `‖self - other‖_F²`.
    pub fn distance_sqr(&self, other: &Self) -> Result<f64, ChannelError> {
        self.check_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm_sqr()).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.re.is_finite() && v.im.is_finite())
    }

    fn check_shape(&self, other: &Self) -> Result<(), ChannelError> {
        if self.shape() != other.shape() {
            return Err(ChannelError::ShapeMismatch(self.shape(), other.shape()));
        }
        Ok(())
    }
}

/// Half-wavelength steering vector, entry `k` (0-based) is `e^{-j pi k theta}`.
pub fn steering_vector(theta: f64, n: usize) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, -PI * k as f64 * theta))
        .collect()
}

/// URA response `a(cos(el) sin(az)) ⊗ a(sin(el))` of length `nx * ny`.
pub fn array_response(az: f64, el: f64, nx: usize, ny: usize) -> Vec<Complex64> {
    let ax = steering_vector(el.cos() * az.sin(), nx);
    let ay = steering_vector(el.sin(), ny);
    let mut out = Vec::with_capacity(nx * ny);
    for a in &ax {
        for b in &ay {
            out.push(a * b);
        }
    }
    out
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Raised-cosine impulse response with unit peak, sampled at time `t`.
pub fn raised_cosine(t: f64, rolloff: f64, ts: f64) -> f64 {
    let x = t / ts;
    if x == 0.0 {
        return 1.0;
    }
    // exact Nyquist zeros
    if x.fract() == 0.0 {
        return 0.0;
    }
    let bx = 2.0 * rolloff * x;
    if rolloff > 0.0 && (bx.abs() - 1.0).abs() < 1e-9 {
        return PI / 4.0 * sinc(1.0 / (2.0 * rolloff));
    }
    sinc(x) * (PI * rolloff * x).cos() / (1.0 - bx * bx)
}

/// Sums every path's rank-one contribution into a `[D, Nr, Nt]` tensor.
pub fn synthesize_channel(
    paths: &[Path],
    arr: &ArrayConfig,
    wf: &WaveformConfig,
) -> Result<ChannelTensor, ChannelError> {
    arr.validate()?;
    let ts = wf.sample_interval_s;
    let taps = wf.num_taps;
    let lo = -DELAY_MARGIN_TAPS * ts;
    let hi = (taps as f64 - 1.0 + DELAY_MARGIN_TAPS) * ts;
    for (index, p) in paths.iter().enumerate() {
        let shifted = p.delay_s - wf.clock_offset_s;
        if !(shifted >= lo && shifted <= hi) {
            return Err(ChannelError::PathDelayOutOfRange {
                index,
                shifted_delay_s: shifted,
            });
        }
    }
    let (nr, nt) = (arr.nr(), arr.nt());
    let mut h = ChannelTensor::zeros(taps, nr, nt);
    for p in paths {
        let ar = array_response(p.aoa_az, p.aoa_el, arr.nr_x, arr.nr_y);
        let at = array_response(p.aod_az, p.aod_el, arr.nt_x, arr.nt_y);
        let shifted = p.delay_s - wf.clock_offset_s;
        for d in 0..taps {
            let pulse = raised_cosine(d as f64 * ts - shifted, wf.rolloff, ts);
            if pulse == 0.0 {
                continue;
            }
            let amp = p.gain * pulse;
            for (r, a_r) in ar.iter().enumerate() {
                let ra = amp * a_r;
                for (dst, a_t) in h.row_mut(d, r).iter_mut().zip(&at) {
                    *dst += ra * a_t;
                }
            }
        }
    }
    Ok(h)
}

/// `P_T * sum_d ‖H_d‖_F²` in watts.
pub fn channel_power(h: &ChannelTensor, tx_power_w: f64) -> f64 {
    tx_power_w * h.norm_sqr()
}

/// Complex path gain from a field magnitude: `(sqrt(eta0)/2) (|E|/sqrt(P_T)) e^{j phase}`.
pub fn gain_from_field(field_mag: f64, tx_power_w: f64, phase: f64) -> Result<Complex64, ChannelError> {
    if !(tx_power_w > 0.0) {
        return Err(ChannelError::NonPositivePower(tx_power_w));
    }
    let mag = ETA0.sqrt() / 2.0 * field_mag / tx_power_w.sqrt();
    Ok(Complex64::from_polar(mag, phase))
}

/// Inverse of [`gain_from_field`]: the complex field phasor carried by a path gain.
pub fn field_from_gain(gain: Complex64, tx_power_w: f64) -> Result<Complex64, ChannelError> {
    if !(tx_power_w > 0.0) {
        return Err(ChannelError::NonPositivePower(tx_power_w));
    }
    Ok(gain * (2.0 * tx_power_w.sqrt() / ETA0.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn wf(taps: usize) -> WaveformConfig {
        WaveformConfig {
            sample_interval_s: 1.0 / 100e6,
            clock_offset_s: 0.0,
            rolloff: 0.4,
            num_taps: taps,
            carrier_hz: 15e9,
            tx_power_w: 1.0,
        }
    }

    fn zero_angle_path(gain: Complex64, delay_s: f64) -> Path {
        Path {
            gain,
            delay_s,
            aoa_az: 0.0,
            aoa_el: 0.0,
            aod_az: 0.0,
            aod_el: 0.0,
        }
    }

    fn random_paths(rng: &mut ChaCha8Rng, n: usize, w: &WaveformConfig) -> Vec<Path> {
        (0..n)
            .map(|_| Path {
                gain: c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                delay_s: rng.random_range(0.0..(w.num_taps as f64) * w.sample_interval_s),
                aoa_az: rng.random_range(-PI..PI),
                aoa_el: rng.random_range(-1.2..1.2),
                aod_az: rng.random_range(-PI..PI),
                aod_el: rng.random_range(-1.2..1.2),
            })
            .collect()
    }

    #[test]
    fn steering_vector_examples() {
        assert!(steering_vector(0.0, 4).iter().all(|v| *v == c(1.0, 0.0)));
        let v = steering_vector(1.0, 2);
        assert_eq!(v[0], c(1.0, 0.0));
        assert!((v[1] - c(-1.0, 0.0)).norm() < 1e-15);
        let v = steering_vector(0.3, 8);
        for (k, x) in v.iter().enumerate() {
            let ang = -PI * k as f64 * 0.3;
            assert!((x - c(ang.cos(), ang.sin())).norm() < 1e-12);
            assert!((x.norm() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn array_response_examples() {
        assert!(array_response(0.0, 0.0, 2, 2)
            .iter()
            .all(|v| (v - c(1.0, 0.0)).norm() < 1e-15));
        let v = array_response(PI / 2.0, 0.0, 2, 1);
        assert!((v[0] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((v[1] - c(-1.0, 0.0)).norm() < 1e-15);

        // explicit six-entry Kronecker product
        let (az, el) = (0.4f64, 0.2f64);
        let tx = el.cos() * az.sin();
        let ty = el.sin();
        let got = array_response(az, el, 3, 2);
        let mut want = Vec::new();
        for i in 0..3 {
            for j in 0..2 {
                let ph = -PI * (i as f64 * tx + j as f64 * ty);
                want.push(c(ph.cos(), ph.sin()));
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn degenerate_kronecker_is_a_steering_vector() {
        let got = array_response(0.7, -0.3, 5, 1);
        let want = steering_vector((-0.3f64).cos() * 0.7f64.sin(), 5);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).norm() < 1e-14);
        }
    }

    /// Inverse Fourier transform of the raised-cosine spectrum by Simpson's rule.
    fn raised_cosine_by_quadrature(t: f64, beta: f64, ts: f64) -> f64 {
        let f1 = (1.0 - beta) / (2.0 * ts);
        let f2 = (1.0 + beta) / (2.0 * ts);
        let spectrum = |f: f64| {
            let f = f.abs();
            if f <= f1 {
                ts
            } else if f <= f2 {
                ts / 2.0 * (1.0 + (PI * ts / beta * (f - f1)).cos())
            } else {
                0.0
            }
        };
        // even spectrum: p(t) = 2 int_0^f2 P(f) cos(2 pi f t) df
        let n = 200_000;
        let h = f2 / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let f = i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * spectrum(f) * (2.0 * PI * f * t).cos();
        }
        2.0 * acc * h / 3.0 / ts
    }

    #[test]
    fn raised_cosine_examples() {
        assert_eq!(raised_cosine(0.0, 0.4, 1.0), 1.0);
        assert!(raised_cosine(3.0, 0.4, 1.0).abs() < 1e-12);
        let oracle = raised_cosine_by_quadrature(1.25, 0.4, 1.0);
        assert!((raised_cosine(1.25, 0.4, 1.0) - oracle).abs() < 1e-9, "{oracle}");
        // analytic limit at beta |t| = ts / 2
        let singular = 1.0 / (2.0 * 0.4);
        let lim = raised_cosine(singular, 0.4, 1.0);
        assert!((lim - raised_cosine_by_quadrature(singular, 0.4, 1.0)).abs() < 1e-9);
        assert!((lim - raised_cosine(singular + 1e-6, 0.4, 1.0)).abs() < 1e-5);
    }

    #[test]
    fn single_path_at_pulse_peak() {
        let arr = ArrayConfig::new(2, 2, 2, 1).unwrap();
        let w = wf(4);
        let h = synthesize_channel(&[zero_angle_path(c(1.0, 0.0), 0.0)], &arr, &w).unwrap();
        assert_eq!(h.shape(), [4, 2, 4]);
        for r in 0..2 {
            for t in 0..4 {
                assert!((h.get(0, r, t) - c(1.0, 0.0)).norm() < 1e-15);
                for d in 1..4 {
                    assert!(h.get(d, r, t).norm() < 1e-15);
                }
            }
        }
        let empty = synthesize_channel(&[], &arr, &w).unwrap();
        assert_eq!(empty.norm_sqr(), 0.0);
    }

    #[test]
    fn delay_outside_window_is_rejected() {
        let arr = ArrayConfig::new(2, 1, 1, 1).unwrap();
        let w = wf(4);
        let late = zero_angle_path(c(1.0, 0.0), 9.0 * w.sample_interval_s);
        assert!(matches!(
            synthesize_channel(&[late], &arr, &w),
            Err(ChannelError::PathDelayOutOfRange { index: 0, .. })
        ));
        let early = zero_angle_path(c(1.0, 0.0), 1e-9);
        let mut shifted = w;
        shifted.clock_offset_s = 1e-6;
        assert!(synthesize_channel(&[early], &arr, &shifted).is_err());
    }

    /// Independent triple loop: taps, paths, antenna pairs, phases written out.
    fn loop_oracle(paths: &[Path], arr: &ArrayConfig, w: &WaveformConfig) -> Vec<Complex64> {
        let (nr, nt) = (arr.nr(), arr.nt());
        let mut out = vec![c(0.0, 0.0); w.num_taps * nr * nt];
        for d in 0..w.num_taps {
            for p in paths {
                let tau = p.delay_s - w.clock_offset_s;
                let pulse = raised_cosine(d as f64 * w.sample_interval_s - tau, w.rolloff, w.sample_interval_s);
                for r in 0..nr {
                    let (rx, ry) = (r / arr.nr_y, r % arr.nr_y);
                    let ph_r = -PI * (rx as f64 * p.aoa_el.cos() * p.aoa_az.sin() + ry as f64 * p.aoa_el.sin());
                    for t in 0..nt {
                        let (tx, ty) = (t / arr.nt_y, t % arr.nt_y);
                        let ph_t = -PI * (tx as f64 * p.aod_el.cos() * p.aod_az.sin() + ty as f64 * p.aod_el.sin());
                        out[(d * nr + r) * nt + t] += p.gain * pulse * Complex64::from_polar(1.0, ph_r + ph_t);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arr = ArrayConfig::new(4, 2, 2, 1).unwrap();
        let w = wf(4);
        let paths = random_paths(&mut rng, 3, &w);
        let h = synthesize_channel(&paths, &arr, &w).unwrap();
        let want = loop_oracle(&paths, &arr, &w);
        let err: f64 = h.as_slice().iter().zip(&want).map(|(a, b)| (a - b).norm_sqr()).sum();
        let norm: f64 = want.iter().map(|v| v.norm_sqr()).sum();
        assert!((err / norm).sqrt() < 1e-10);
    }

    #[test]
    fn channel_power_examples() {
        let arr = ArrayConfig::new(4, 2, 3, 1).unwrap();
        let w = wf(3);
        assert_eq!(channel_power(&ChannelTensor::zeros(3, 3, 8), 7.0), 0.0);
        let g = 0.37;
        let h = synthesize_channel(&[zero_angle_path(c(0.0, g), 0.0)], &arr, &w).unwrap();
        let want = 2.5 * g * g * 3.0 * 8.0;
        assert!((channel_power(&h, 2.5) - want).abs() < 1e-12 * want);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<Complex64> = (0..60).map(|_| c(rng.random(), rng.random())).collect();
        let t = ChannelTensor::from_vec(3, 4, 5, data.clone());
        let mut direct = 0.0;
        for v in &data {
            direct += v.re * v.re + v.im * v.im;
        }
        assert!((channel_power(&t, 3.0) - 3.0 * direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn gain_from_field_examples() {
        assert_eq!(gain_from_field(0.0, 1.0, 1.3).unwrap().norm(), 0.0);
        let g = gain_from_field(2.0 / ETA0.sqrt(), 1.0, 0.0).unwrap();
        assert!((g - c(1.0, 0.0)).norm() < 1e-15);
        let g = gain_from_field(1.5, 4.0, PI / 3.0).unwrap();
        let mag = ETA0.sqrt() / 2.0 * (1.5 / 2.0);
        assert!((g.norm() - mag).abs() < 1e-12 * mag);
        assert!((g.arg() - PI / 3.0).abs() < 1e-12);
        assert!(matches!(
            gain_from_field(1.0, 0.0, 0.0),
            Err(ChannelError::NonPositivePower(_))
        ));
        let e = field_from_gain(g, 4.0).unwrap();
        assert!((e.norm() - 1.5).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn steering_norm_is_length(theta in -3.0f64..3.0, n in 1usize..40) {
            let v = steering_vector(theta, n);
            let e: f64 = v.iter().map(|x| x.norm_sqr()).sum();
            prop_assert!((e - n as f64).abs() < 1e-10);
        }

        #[test]
        fn synthesis_is_linear_and_conjugate_symmetric(seed in 0u64..1000, na in 0usize..4, nb in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let arr = ArrayConfig::new(3, 2, 2, 2).unwrap();
            let w = wf(5);
            let a = random_paths(&mut rng, na, &w);
            let b = random_paths(&mut rng, nb, &w);
            let ha = synthesize_channel(&a, &arr, &w).unwrap();
            let hb = synthesize_channel(&b, &arr, &w).unwrap();
            let mut ab = a.clone();
            ab.extend_from_slice(&b);
            let hab = synthesize_channel(&ab, &arr, &w).unwrap();
            let sum = ha.add(&hb).unwrap();
            prop_assert!(hab.distance_sqr(&sum).unwrap().sqrt() < 1e-12 * (1.0 + hab.norm_sqr().sqrt()));

            // conjugating gains conjugates the tensor only when angle phases vanish
            let zero: Vec<Path> = a.iter().map(|p| zero_angle_path(p.gain, p.delay_s)).collect();
            let conj: Vec<Path> = zero.iter().map(|p| Path { gain: p.gain.conj(), ..*p }).collect();
            let h0 = synthesize_channel(&zero, &arr, &w).unwrap();
            let h1 = synthesize_channel(&conj, &arr, &w).unwrap();
            prop_assert!(h1.distance_sqr(&h0.conj()).unwrap() < 1e-24 * (1.0 + h0.norm_sqr()));
        }

        #[test]
        fn power_scales_quadratically(seed in 0u64..1000, s in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let arr = ArrayConfig::new(2, 2, 2, 1).unwrap();
            let w = wf(4);
            let p = random_paths(&mut rng, 3, &w);
            let q: Vec<Path> = p.iter().map(|x| Path { gain: x.gain * s, ..*x }).collect();
            let p0 = channel_power(&synthesize_channel(&p, &arr, &w).unwrap(), 2.0);
            let p1 = channel_power(&synthesize_channel(&q, &arr, &w).unwrap(), 2.0);
            prop_assert!((p1 - s * s * p0).abs() <= 1e-10 * (1.0 + p1));
        }
    }
}
