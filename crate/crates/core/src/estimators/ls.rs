//! Least-squares estimators: antenna-domain interpolation, beamspace DFT
//! denoising, and OFDM subcarrier interpolation.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::{interp_mag_phase, EstimatorError, PilotKind, PilotObservation};
use crate::channel::ChannelTensor;
use crate::fft::FftPlan;

/// LS at the pilot antennas, magnitude/unwrapped-phase interpolation elsewhere.
pub fn ls_interp(obs: &PilotObservation) -> Result<ChannelTensor, EstimatorError> {
    obs.expect_kind(PilotKind::Antenna)?;
    let mut out = ChannelTensor::zeros(obs.taps, obs.nr, obs.nt);
    for d in 0..obs.taps {
        for r in 0..obs.nr {
            interp_mag_phase(&obs.pattern.indices, obs.row(d * obs.nr + r), out.row_mut(d, r));
        }
    }
    Ok(out)
}

/// Pilot samples in place, zeros at every other antenna.
pub fn zero_padded_ls(obs: &PilotObservation) -> Result<ChannelTensor, EstimatorError> {
    obs.expect_kind(PilotKind::Antenna)?;
    let mut out = ChannelTensor::zeros(obs.taps, obs.nr, obs.nt);
    for d in 0..obs.taps {
        for r in 0..obs.nr {
            let src = obs.row(d * obs.nr + r);
            let row = out.row_mut(d, r);
            for (&p, &v) in obs.pattern.indices.iter().zip(src) {
                row[p] = v;
            }
        }
    }
    Ok(out)
}

/// `3 sqrt(σ² Np / (2 Nt))`: three standard deviations of one real
/// component of a zero-padded noise bin in the normalized beamspace.
pub fn beamspace_threshold(noise_var: f64, np: usize, nt: usize) -> f64 {
    3.0 * (noise_var * np as f64 / (2.0 * nt as f64)).sqrt()
}

/// Beamspace denoising with the noise-adaptive threshold.
pub fn ls_dft_denoise(obs: &PilotObservation) -> Result<ChannelTensor, EstimatorError> {
    ls_dft_with_threshold(obs, beamspace_threshold(obs.noise_var, obs.pilot_count(), obs.nt))
}

/// Zero-pad, go to beamspace with the normalized `F^H`, drop bins below `tau`,
/// come back with `F`.
pub fn ls_dft_with_threshold(obs: &PilotObservation, tau: f64) -> Result<ChannelTensor, EstimatorError> {
    let mut out = zero_padded_ls(obs)?;
    let nt = obs.nt;
    let plan = FftPlan::new(nt);
    let sqrt_n = (nt as f64).sqrt();
    let mut beam = vec![Complex64::new(0.0, 0.0); nt];
    for d in 0..obs.taps {
        for r in 0..obs.nr {
            let row = out.row_mut(d, r);
            beam.copy_from_slice(row);
            // F^H x = sqrt(N) * ifft(x) for the unitary DFT F = fft / sqrt(N)
            plan.inverse(&mut beam);
            let mut zeroed = false;
            for b in beam.iter_mut() {
                *b *= sqrt_n;
                if b.norm() < tau {
                    *b = Complex64::new(0.0, 0.0);
                    zeroed = true;
                }
            }
            // Nothing dropped: F F^H = I, so keep the samples bit-exact.
            if !zeroed {
                continue;
            }
            plan.forward(&mut beam);
            for (dst, b) in row.iter_mut().zip(&beam) {
                *dst = b / sqrt_n;
            }
        }
    }
    Ok(out)
}

/// Subcarrier LS with magnitude/phase interpolation, IFFT, first `D` taps kept.
pub fn ls_ofdm(obs: &PilotObservation) -> Result<ChannelTensor, EstimatorError> {
    obs.expect_kind(PilotKind::Subcarrier)?;
    let np = obs.pilot_count();
    if np < 2 {
        return Err(EstimatorError::InsufficientPilots(np));
    }
    let n_fft = obs.pattern.dim;
    let plan = FftPlan::new(n_fft);
    let mut out = ChannelTensor::zeros(obs.taps, obs.nr, obs.nt);
    let mut spectrum: Vec<Complex64> = vec![Complex64::new(0.0, 0.0); n_fft];
    for r in 0..obs.nr {
        for t in 0..obs.nt {
            interp_mag_phase(&obs.pattern.indices, obs.row(r * obs.nt + t), &mut spectrum);
            plan.inverse(&mut spectrum);
            for d in 0..obs.taps {
                out.set(d, r, t, spectrum[d]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{complex_gaussian, make_pilot_pattern, nmse_db, nmse_linear, observe};
    use super::*;
    use core::f64::consts::PI;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_channel(rng: &mut ChaCha8Rng, taps: usize, nr: usize, nt: usize) -> ChannelTensor {
        let data = (0..taps * nr * nt).map(|_| complex_gaussian(rng, 1.0)).collect();
        ChannelTensor::from_vec(taps, nr, nt, data)
    }

    fn ula_channel(rng: &mut ChaCha8Rng, nt: usize, thetas: &[f64]) -> ChannelTensor {
        let mut h = ChannelTensor::zeros(1, 1, nt);
        for &th in thetas {
            let g = complex_gaussian(rng, 1.0);
            for t in 0..nt {
                let v = h.get(0, 0, t) + g * Complex64::from_polar(1.0, -PI * t as f64 * th);
                h.set(0, 0, t, v);
            }
        }
        h
    }

    #[test]
    fn full_pilots_noiseless_are_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let h = random_channel(&mut rng, 3, 2, 16);
            let p = make_pilot_pattern(PilotKind::Antenna, 16, 16).unwrap();
            let obs = observe(&h, &p, f64::INFINITY, &mut rng).unwrap();
            assert!(nmse_db(&ls_interp(&obs).unwrap(), &h).unwrap() <= -300.0);
            assert!(nmse_db(&ls_dft_denoise(&obs).unwrap(), &h).unwrap() <= -300.0);
            let sc = make_pilot_pattern(PilotKind::Subcarrier, 64, 64).unwrap();
            let obs = observe(&h, &sc, f64::INFINITY, &mut rng).unwrap();
            assert!(nmse_linear(&ls_ofdm(&obs).unwrap(), &h).unwrap() < 1e-20);
        }
    }

    #[test]
    fn constant_channel_is_recovered_by_interpolation() {
        let c = Complex64::new(-0.3, 0.9);
        let h = ChannelTensor::from_vec(2, 1, 10, vec![c; 20]);
        let p = make_pilot_pattern(PilotKind::Antenna, 10, 3).unwrap();
        let est = ls_interp(&observe(&h, &p, f64::INFINITY, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()).unwrap();
        assert!(est.distance_sqr(&h).unwrap() < 1e-28);
    }

    /// Straight transcription of the interpolation recipe for one row.
    fn scripted_interp(pilots: &[(usize, Complex64)], n: usize) -> Vec<Complex64> {
        let mut phases: Vec<f64> = pilots.iter().map(|p| p.1.arg()).collect();
        for i in 1..phases.len() {
            while phases[i] - phases[i - 1] > PI {
                phases[i] -= 2.0 * PI;
            }
            while phases[i] - phases[i - 1] < -PI {
                phases[i] += 2.0 * PI;
            }
        }
        (0..n)
            .map(|k| {
                let mut j = 0;
                while j + 1 < pilots.len() && pilots[j + 1].0 <= k {
                    j += 1;
                }
                if k >= pilots[pilots.len() - 1].0 {
                    let last = pilots.len() - 1;
                    return Complex64::from_polar(pilots[last].1.norm(), phases[last]);
                }
                let (x0, x1) = (pilots[j].0 as f64, pilots[j + 1].0 as f64);
                let w = (k as f64 - x0) / (x1 - x0);
                let m = pilots[j].1.norm() * (1.0 - w) + pilots[j + 1].1.norm() * w;
                let ph = phases[j] * (1.0 - w) + phases[j + 1] * w;
                Complex64::from_polar(m, ph)
            })
            .collect()
    }

    #[test]
    fn single_path_interp_matches_scripted_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = ula_channel(&mut rng, 16, &[0.37]);
        let p = make_pilot_pattern(PilotKind::Antenna, 16, 4).unwrap();
        let obs = observe(&h, &p, f64::INFINITY, &mut rng).unwrap();
        let est = ls_interp(&obs).unwrap();
        let pilots: Vec<(usize, Complex64)> = p.indices.iter().map(|&i| (i, h.get(0, 0, i))).collect();
        let want = ChannelTensor::from_vec(1, 1, 16, scripted_interp(&pilots, 16));
        let a = nmse_db(&est, &h).unwrap();
        let b = nmse_db(&want, &h).unwrap();
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }

    #[test]
    fn on_grid_beam_is_exact() {
        let nt = 32;
        let k = 5;
        let data = (0..nt)
            .map(|t| Complex64::from_polar(1.0, 2.0 * PI * (k * t) as f64 / nt as f64))
            .collect();
        let h = ChannelTensor::from_vec(1, 1, nt, data);
        let p = make_pilot_pattern(PilotKind::Antenna, nt, nt).unwrap();
        let obs = observe(&h, &p, f64::INFINITY, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let est = ls_dft_with_threshold(&obs, 0.5).unwrap();
        assert!(nmse_linear(&est, &h).unwrap() < 1e-28);
    }

    #[test]
    fn zero_tau_full_pilots_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_channel(&mut rng, 2, 2, 12);
        let p = make_pilot_pattern(PilotKind::Antenna, 12, 12).unwrap();
        let obs = observe(&h, &p, 5.0, &mut rng).unwrap();
        let est = ls_dft_with_threshold(&obs, 0.0).unwrap();
        assert_eq!(est, zero_padded_ls(&obs).unwrap());
    }

    #[test]
    fn noise_bins_are_mostly_zeroed() {
        // A noise bin survives with probability exp(-tau²/var) = exp(-4.5).
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let nt = 64;
        let h = ChannelTensor::zeros(1, 1, nt);
        let p = make_pilot_pattern(PilotKind::Antenna, nt, 16).unwrap();
        let (mut kept, mut total) = (0usize, 0usize);
        for _ in 0..1000 {
            let mut obs = observe(&h, &p, 0.0, &mut rng).unwrap();
            obs.noise_var = 1.0;
            for v in obs.values.iter_mut() {
                *v = complex_gaussian(&mut rng, 1.0);
            }
            let tau = beamspace_threshold(1.0, 16, nt);
            let mut beam = zero_padded_ls(&obs).unwrap().into_vec();
            FftPlan::new(nt).inverse(&mut beam);
            kept += beam.iter().filter(|b| b.norm() * (nt as f64).sqrt() >= tau).count();
            total += nt;
        }
        let frac_zeroed = 1.0 - kept as f64 / total as f64;
        let expected = 1.0 - (-4.5f64).exp();
        assert!((frac_zeroed - expected).abs() < 0.002, "{frac_zeroed}");
    }

    #[test]
    fn denoising_beats_plain_zero_padding_off_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = make_pilot_pattern(PilotKind::Antenna, 16, 8).unwrap();
        let (mut dft, mut zp) = (0.0, 0.0);
        for _ in 0..100 {
            let h = ula_channel(&mut rng, 16, &[0.231]);
            let obs = observe(&h, &p, 0.0, &mut rng).unwrap();
            dft += nmse_linear(&ls_dft_denoise(&obs).unwrap(), &h).unwrap();
            zp += nmse_linear(&zero_padded_ls(&obs).unwrap(), &h).unwrap();
        }
        assert!(dft < zp, "{dft} vs {zp}");
    }

    #[test]
    fn flat_channel_with_four_subcarriers() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut h = random_channel(&mut rng, 4, 2, 3);
        for d in 1..4 {
            for r in 0..2 {
                for t in 0..3 {
                    h.set(d, r, t, Complex64::new(0.0, 0.0));
                }
            }
        }
        let p = make_pilot_pattern(PilotKind::Subcarrier, 64, 4).unwrap();
        let est = ls_ofdm(&observe(&h, &p, f64::INFINITY, &mut rng).unwrap()).unwrap();
        assert!(nmse_linear(&est, &h).unwrap() < 1e-24);
        let one = make_pilot_pattern(PilotKind::Subcarrier, 64, 1).unwrap();
        let obs = observe(&h, &one, f64::INFINITY, &mut rng).unwrap();
        assert_eq!(ls_ofdm(&obs), Err(EstimatorError::InsufficientPilots(1)));
        assert!(ls_interp(&obs).is_err());
    }

    #[test]
    fn scale_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = random_channel(&mut rng, 2, 2, 16);
        let s = Complex64::from_polar(2.5, 0.7);
        let p = make_pilot_pattern(PilotKind::Antenna, 16, 8).unwrap();
        let obs = observe(&h, &p, 10.0, &mut rng).unwrap();
        let scaled = obs.scaled(s);
        for f in [ls_interp, ls_dft_denoise] {
            let a = f(&scaled).unwrap();
            let b = f(&obs).unwrap().scaled(s);
            assert!(a.distance_sqr(&b).unwrap() < 1e-20 * b.norm_sqr());
        }
        let sc = make_pilot_pattern(PilotKind::Subcarrier, 32, 8).unwrap();
        let obs = observe(&h, &sc, 10.0, &mut rng).unwrap();
        let a = ls_ofdm(&obs.scaled(s)).unwrap();
        let b = ls_ofdm(&obs).unwrap().scaled(s);
        assert!(a.distance_sqr(&b).unwrap() < 1e-20 * b.norm_sqr());
    }
}
