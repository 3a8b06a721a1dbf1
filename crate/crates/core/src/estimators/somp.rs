//! Simultaneous orthogonal matching pursuit over an oversampled steering dictionary.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use num_complex::Complex64;
#[cfg(not(feature = "std"))]
use num_traits::Float;

use super::{EstimatorError, PilotKind, PilotObservation};
use crate::channel::{ArrayConfig, ChannelTensor};

const RANK_TOL: f64 = 1e-10;
const ALIAS_TOL: f64 = 1e-10;
/// Candidates whose energy outside the span of the selected atoms (on the
/// pilots) is below this fraction are skipped: fitting them only amplifies
/// noise into the unobserved antennas.
pub const SPAN_TOL: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct SompResult {
    pub estimate: ChannelTensor,
    /// Selected dictionary columns per tap, in selection order.
    pub supports: Vec<Vec<usize>>,
}

/// Transmit-side steering dictionary, `[G, Nt]` row-major (one atom per row).
///
/// A linear array gets `grid_size` atoms on `ϑ = -1 + 2g/G`. A planar array
/// gets the Kronecker grid with each axis oversampled by
/// `ceil(sqrt(grid_size / Nt))`.
pub fn steering_dictionary(arr: &ArrayConfig, grid_size: usize) -> Result<(usize, Vec<Complex64>), EstimatorError> {
    let (nx, ny) = (arr.nt_x, arr.nt_y);
    let nt = nx * ny;
    if grid_size < nt {
        return Err(EstimatorError::InvalidGrid("grid size smaller than Nt"));
    }
    let (gx, gy) = if nx == 1 || ny == 1 {
        if nx == 1 {
            (1, grid_size)
        } else {
            (grid_size, 1)
        }
    } else {
        let mut f = 1;
        while f * f * nt < grid_size {
            f += 1;
        }
        (f * nx, f * ny)
    };
    let axis = |g: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * g as f64 / n as f64 };
    let mut atoms = Vec::with_capacity(gx * gy * nt);
    for ix_g in 0..gx {
        let u = axis(ix_g, gx);
        for iy_g in 0..gy {
            let v = axis(iy_g, gy);
            for ix in 0..nx {
                for iy in 0..ny {
                    atoms.push(Complex64::from_polar(1.0, -PI * (ix as f64 * u + iy as f64 * v)));
                }
            }
        }
    }
    Ok((gx * gy, atoms))
}

pub fn somp(
    obs: &PilotObservation,
    arr: &ArrayConfig,
    grid_size: usize,
    max_sparsity: usize,
) -> Result<ChannelTensor, EstimatorError> {
    somp_with_support(obs, arr, grid_size, max_sparsity).map(|r| r.estimate)
}

/// Per tap, greedy joint selection across the receive rows with an LS refit
/// after every step. Stops at `max_sparsity` atoms, at `Np` atoms, or once
/// the residual norm falls to `σ sqrt(Nr Np)`.
pub fn somp_with_support(
    obs: &PilotObservation,
    arr: &ArrayConfig,
    grid_size: usize,
    max_sparsity: usize,
) -> Result<SompResult, EstimatorError> {
    obs.expect_kind(PilotKind::Antenna)?;
    if arr.nt() != obs.nt {
        return Err(EstimatorError::PatternMismatch(
            "array size differs from observation Nt",
        ));
    }
    let (g_count, atoms) = steering_dictionary(arr, grid_size)?;
    let nt = obs.nt;
    let np = obs.pilot_count();
    let nr = obs.nr;
    let pilots = &obs.pattern.indices;
    // dictionary restricted to pilot antennas, [G, Np]
    let mut sub = Vec::with_capacity(g_count * np);
    for g in 0..g_count {
        sub.extend(pilots.iter().map(|&p| atoms[g * nt + p]));
    }
    let sub_atom = |g: usize| &sub[g * np..(g + 1) * np];
    let atom_norm_sqr = np as f64;

    let stop = obs.noise_var.sqrt() * ((nr * np) as f64).sqrt();
    let limit = max_sparsity.min(np);
    let mut estimate = ChannelTensor::zeros(obs.taps, nr, nt);
    let mut supports = Vec::with_capacity(obs.taps);

    for d in 0..obs.taps {
        let y: Vec<&[Complex64]> = (0..nr).map(|r| obs.row(d * nr + r)).collect();
        let y_norm = y
            .iter()
            .flat_map(|row| row.iter())
            .map(|v| v.norm_sqr())
            .sum::<f64>()
            .sqrt();
        let floor = stop.max(1e-12 * y_norm);
        let mut residual: Vec<Vec<Complex64>> = y.iter().map(|row| row.to_vec()).collect();
        let mut support: Vec<usize> = Vec::new();
        let mut coeffs: Vec<Vec<Complex64>> = Vec::new();
        let mut excluded = vec![false; g_count];
        // Orthonormal basis of the selected sub-atoms.
        let mut basis: Vec<Vec<Complex64>> = Vec::new();
        loop {
            let res_norm = residual
                .iter()
                .flat_map(|row| row.iter())
                .map(|v| v.norm_sqr())
                .sum::<f64>()
                .sqrt();
            if res_norm <= floor || support.len() >= limit {
                break;
            }
            let mut best = None;
            let mut best_corr = -1.0;
            for g in 0..g_count {
                if excluded[g] {
                    continue;
                }
                let a = sub_atom(g);
                let outside = atom_norm_sqr - basis.iter().map(|q| inner(q, a).norm_sqr()).sum::<f64>();
                if outside < SPAN_TOL * atom_norm_sqr {
                    continue;
                }
                let corr: f64 = residual.iter().map(|row| inner(a, row).norm_sqr()).sum();
                if corr > best_corr {
                    best_corr = corr;
                    best = Some(g);
                }
            }
            let Some(g) = best else { break };
            support.push(g);
            let mut q = sub_atom(g).to_vec();
            for b in &basis {
                let c = inner(b, &q);
                for (qi, bi) in q.iter_mut().zip(b) {
                    *qi -= c * bi;
                }
            }
            let qn = q.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            basis.push(q.into_iter().map(|v| v / qn).collect());
            // atoms identical on the pilots carry no new information
            for (h, ex) in excluded.iter_mut().enumerate() {
                if !*ex && inner(sub_atom(g), sub_atom(h)).norm() >= (1.0 - ALIAS_TOL) * atom_norm_sqr {
                    *ex = true;
                }
            }
            coeffs = refit(&support, &sub_atom, &y)?;
            for r in 0..nr {
                for (i, res) in residual[r].iter_mut().enumerate() {
                    let fit: Complex64 = support.iter().zip(&coeffs[r]).map(|(&s, c)| sub_atom(s)[i] * c).sum();
                    *res = y[r][i] - fit;
                }
            }
        }
        for r in 0..nr {
            let row = estimate.row_mut(d, r);
            for (&s, c) in support.iter().zip(coeffs.get(r).into_iter().flatten()) {
                for (dst, a) in row.iter_mut().zip(&atoms[s * nt..(s + 1) * nt]) {
                    *dst += a * c;
                }
            }
        }
        supports.push(support);
    }
    Ok(SompResult { estimate, supports })
}

/// `a^H b`
fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// LS coefficients for every receive row via a Cholesky solve of the Gram matrix.
fn refit<'a, F>(support: &[usize], atom: &F, y: &[&[Complex64]]) -> Result<Vec<Vec<Complex64>>, EstimatorError>
where
    F: Fn(usize) -> &'a [Complex64],
{
    let k = support.len();
    let mut l = vec![Complex64::new(0.0, 0.0); k * k];
    for i in 0..k {
        for j in 0..=i {
            let mut s = inner(atom(support[i]), atom(support[j]));
            for m in 0..j {
                s -= l[i * k + m] * l[j * k + m].conj();
            }
            if i == j {
                let scale = atom(support[i]).len() as f64;
                if s.re <= RANK_TOL * scale {
                    return Err(EstimatorError::DictionaryRankDeficient);
                }
                l[i * k + i] = Complex64::new(s.re.sqrt(), 0.0);
            } else {
                l[i * k + j] = s / l[j * k + j].re;
            }
        }
    }
    Ok(y.iter()
        .map(|row| {
            let rhs: Vec<Complex64> = support.iter().map(|&s| inner(atom(s), row)).collect();
            // L z = rhs, then L^H x = z
            let mut z = vec![Complex64::new(0.0, 0.0); k];
            for i in 0..k {
                let mut s = rhs[i];
                for m in 0..i {
                    s -= l[i * k + m] * z[m];
                }
                z[i] = s / l[i * k + i].re;
            }
            let mut x = vec![Complex64::new(0.0, 0.0); k];
            for i in (0..k).rev() {
                let mut s = z[i];
                for m in i + 1..k {
                    s -= l[m * k + i].conj() * x[m];
                }
                x[i] = s / l[i * k + i].re;
            }
            x
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::super::{complex_gaussian, make_pilot_pattern, nmse_linear, observe};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn planted(rng: &mut ChaCha8Rng, arr: &ArrayConfig, grid: usize, cols: &[usize], nr: usize) -> ChannelTensor {
        let (_, atoms) = steering_dictionary(arr, grid).unwrap();
        let nt = arr.nt();
        let mut h = ChannelTensor::zeros(1, nr, nt);
        for &g in cols {
            for r in 0..nr {
                let c = complex_gaussian(rng, 1.0);
                let row = h.row_mut(0, r);
                for (dst, a) in row.iter_mut().zip(&atoms[g * nt..(g + 1) * nt]) {
                    *dst += a * c;
                }
            }
        }
        h
    }

    #[test]
    fn single_on_grid_atom_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arr = ArrayConfig::new(16, 1, 2, 1).unwrap();
        let h = planted(&mut rng, &arr, 32, &[11], 2);
        let p = make_pilot_pattern(PilotKind::Antenna, 16, 16).unwrap();
        let obs = observe(&h, &p, f64::INFINITY, &mut rng).unwrap();
        let res = somp_with_support(&obs, &arr, 32, 1).unwrap();
        assert_eq!(res.supports[0], vec![11]);
        assert!(nmse_linear(&res.estimate, &h).unwrap() < 1e-24);
    }

    #[test]
    fn zero_observation_selects_nothing() {
        let arr = ArrayConfig::new(8, 1, 1, 1).unwrap();
        let h = ChannelTensor::zeros(2, 1, 8);
        let p = make_pilot_pattern(PilotKind::Antenna, 8, 4).unwrap();
        let obs = observe(&h, &p, f64::INFINITY, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let res = somp_with_support(&obs, &arr, 16, 8).unwrap();
        assert!(res.supports.iter().all(|s| s.is_empty()));
        assert_eq!(res.estimate.norm_sqr(), 0.0);
    }

    #[test]
    fn planted_support_recovery_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let arr = ArrayConfig::new(16, 1, 2, 1).unwrap();
        let p = make_pilot_pattern(PilotKind::Antenna, 16, 16).unwrap();
        let mut hits = 0;
        for _ in 0..200 {
            let a = rng.random_range(0..16);
            let b = (a + rng.random_range(1..16)) % 16;
            let h = planted(&mut rng, &arr, 16, &[a, b], 2);
            let obs = observe(&h, &p, 20.0, &mut rng).unwrap();
            let mut got = somp_with_support(&obs, &arr, 16, 2).unwrap().supports.remove(0);
            got.sort();
            let mut want = vec![a, b];
            want.sort();
            hits += (got == want) as usize;
        }
        assert!(hits >= 190, "{hits}/200");
    }

    #[test]
    fn planar_dictionary_recovers_kronecker_atom() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let arr = ArrayConfig::new(4, 4, 1, 1).unwrap();
        let (g, _) = steering_dictionary(&arr, 64).unwrap();
        assert_eq!(g, 64);
        let h = planted(&mut rng, &arr, 64, &[37], 1);
        let p = make_pilot_pattern(PilotKind::Antenna, 16, 8).unwrap();
        let obs = observe(&h, &p, f64::INFINITY, &mut rng).unwrap();
        let res = somp_with_support(&obs, &arr, 64, 4).unwrap();
        assert!(nmse_linear(&res.estimate, &h).unwrap() < 1e-20);
    }

    #[test]
    fn support_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let arr = ArrayConfig::new(16, 1, 2, 1).unwrap();
        let h = planted(&mut rng, &arr, 32, &[3, 20, 27], 2);
        let p = make_pilot_pattern(PilotKind::Antenna, 16, 12).unwrap();
        let obs = observe(&h, &p, 15.0, &mut rng).unwrap();
        let a = somp_with_support(&obs, &arr, 32, 8).unwrap().supports;
        let b = somp_with_support(&obs.scaled(Complex64::from_polar(7.0, -1.2)), &arr, 32, 8)
            .unwrap()
            .supports;
        assert_eq!(a, b);
    }

    #[test]
    fn bad_grid_is_rejected() {
        let arr = ArrayConfig::new(8, 1, 1, 1).unwrap();
        let h = ChannelTensor::zeros(1, 1, 8);
        let p = make_pilot_pattern(PilotKind::Antenna, 8, 8).unwrap();
        let obs = observe(&h, &p, f64::INFINITY, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(matches!(somp(&obs, &arr, 4, 2), Err(EstimatorError::InvalidGrid(_))));
    }
}
