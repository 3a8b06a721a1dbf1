use alloc::vec;
use alloc::vec::Vec;

use super::PinnError;
use crate::autodiff::{Tape, Tensor, Var};

/// Per-sample constants of the power-consistency term, in normalized units.
///
/// For sample `n` the residual is `target[n] - coeff[n] * sum(pred_n0^2)`
/// where `pred_n0` is the first predicted snapshot in network units,
/// `target = P_EM / P_norm` and `coeff = kappa * P_T * s_n^2 / P_norm`
/// (`s_n` being the input scale that maps network units back to the channel).
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsBatch {
    pub target: Vec<f64>,
    pub coeff: Vec<f64>,
}

/// NMSE of every `(sample, step)` pair of `[N, L, ...]` tensors.
pub fn nmse_terms(pred: &[f64], truth: &[f64], pairs: usize) -> Result<Vec<f64>, PinnError> {
    let m = truth.len() / pairs.max(1);
    pred.chunks(m)
        .zip(truth.chunks(m))
        .map(|(p, q)| {
            let den: f64 = q.iter().map(|v| v * v).sum();
            if !(den > 0.0) {
                return Err(PinnError::ZeroReference);
            }
            Ok(p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / den)
        })
        .collect()
}

/// `mean_{n,l} NMSE(pred, truth) + zeta * mean_n r_n^2` on the tape.
///
/// `pred` is `[N, L, ...]` and `truth` matches it. With `zeta == 0` or no
/// physics batch only the NMSE term is recorded.
pub fn loss_total(
    t: &mut Tape,
    pred: Var,
    truth: &Tensor,
    phys: Option<&PhysicsBatch>,
    zeta: f64,
) -> Result<Var, PinnError> {
    let ps = t.shape(pred).to_vec();
    if ps != truth.shape || ps.len() < 2 {
        return Err(PinnError::ShapeMismatch {
            expected: truth.shape.clone(),
            got: ps,
        });
    }
    let (n, l) = (ps[0], ps[1]);
    let pairs = n * l;
    let m = truth.len() / pairs.max(1);
    let mut inv = Vec::with_capacity(pairs);
    for q in truth.data.chunks(m) {
        let den: f64 = q.iter().map(|v| v * v).sum();
        if !(den > 0.0) {
            return Err(PinnError::ZeroReference);
        }
        inv.push(1.0 / den);
    }
    let neg = Tensor::new(&truth.shape, truth.data.iter().map(|v| -v).collect());
    let diff = t.add_const(pred, &neg)?;
    let sq = t.square(diff);
    let sq = t.reshape(sq, &[pairs, m])?;
    let err = t.sum_rows(sq)?;
    let err = t.mul_const(err, &Tensor::new(&[pairs], inv))?;
    let err = t.sum(err);
    let nmse = t.scale(err, 1.0 / pairs as f64);

    let Some(phys) = phys.filter(|_| zeta > 0.0) else {
        return Ok(nmse);
    };
    if phys.target.len() != n || phys.coeff.len() != n {
        return Err(PinnError::ShapeMismatch {
            expected: vec![n],
            got: vec![phys.target.len(), phys.coeff.len()],
        });
    }
    // Only the first snapshot is tied to the RSS measured at the crop center.
    let mut mask = vec![0.0; pairs];
    for (i, c) in phys.coeff.iter().enumerate() {
        mask[i * l] = *c;
    }
    let p2 = t.square(pred);
    let p2 = t.reshape(p2, &[pairs, m])?;
    let power = t.sum_rows(p2)?;
    let power = t.mul_const(power, &Tensor::new(&[pairs], mask))?;
    let power = t.reshape(power, &[n, l])?;
    let power = t.sum_rows(power)?;
    let neg_power = t.scale(power, -1.0);
    let resid = t.add_const(neg_power, &Tensor::new(&[n], phys.target.clone()))?;
    let r2 = t.square(resid);
    let r2 = t.sum(r2);
    let phy = t.scale(r2, zeta / n as f64);
    Ok(t.add(nmse, phy)?)
}

/// Least-squares `kappa` minimizing `sum (p_em - kappa * p_chan)^2`.
pub fn calibrate_kappa(p_em: &[f64], p_chan: &[f64]) -> Result<f64, PinnError> {
    if p_em.is_empty() || p_em.len() != p_chan.len() {
        return Err(PinnError::EmptyDataset);
    }
    let num: f64 = p_em.iter().zip(p_chan).map(|(a, b)| a * b).sum();
    let den: f64 = p_chan.iter().map(|b| b * b).sum();
    if !(den > 0.0) {
        return Err(PinnError::ZeroReference);
    }
    Ok(num / den)
}
