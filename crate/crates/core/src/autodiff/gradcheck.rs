use alloc::vec;
use alloc::vec::Vec;

use super::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Largest relative error over all checked entries.
    pub max_rel_error: f64,
    /// Largest relative error per parameter tensor.
    pub per_param: Vec<f64>,
    pub checked: usize,
    pub passed: bool,
}

/// Compares tape gradients of `f` with central differences.
///
/// `f` records a scalar loss given one var per tensor in `params`. At most
/// `max_entries` evenly spaced entries per tensor are probed (all when
/// `None`). The relative error of an entry is `|a - n| / max(|a|, |n|, floor)`
/// where the floor, `1e-8 max(1, |loss|) + 1e-6 max|n|`, keeps entries whose
/// true derivative is zero from dominating through round-off.
pub fn gradcheck<F>(
    f: F,
    params: &[Tensor],
    eps: f64,
    tol: f64,
    max_entries: Option<usize>,
) -> Result<GradcheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |ps: &[Tensor]| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().enumerate().map(|(i, t)| tape.param(t.clone(), i)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(t.clone(), i))
        .collect();
    let loss = f(&mut tape, &vars)?;
    let l0 = tape.value(loss).data[0];
    let grads = tape.backward(loss)?;
    let l1 = eval(params)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(AutodiffError::NonDeterministicFunction(l0, l1));
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut pairs: Vec<(usize, f64, f64)> = Vec::new();
    for (p, t) in params.iter().enumerate() {
        let n = t.len();
        let count = max_entries.map_or(n, |m| m.min(n));
        let analytic = grads.get(p).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for j in 0..count {
            let i = if count == n { j } else { j * n / count };
            let orig = work[p].data[i];
            work[p].data[i] = orig + eps;
            let up = eval(&work)?;
            work[p].data[i] = orig - eps;
            let down = eval(&work)?;
            work[p].data[i] = orig;
            pairs.push((p, analytic[i], (up - down) / (2.0 * eps)));
        }
    }
    let max_numeric = pairs.iter().map(|x| x.2.abs()).fold(0.0, f64::max);
    let floor = 1e-8 * l0.abs().max(1.0) + 1e-6 * max_numeric;
    let mut per_param = vec![0.0f64; params.len()];
    for &(p, a, n) in &pairs {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        per_param[p] = per_param[p].max(rel);
    }
    let max_rel_error = per_param.iter().cloned().fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_error,
        per_param,
        checked: pairs.len(),
        passed: max_rel_error < tol,
    })
}
