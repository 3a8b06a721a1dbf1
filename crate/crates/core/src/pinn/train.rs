use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{calibrate_kappa, loss_total, nmse_terms, PhysicsBatch};
use super::model::{forward, init_params, ModelParams, Net};
use super::{batch_inputs, check_channel, from_planes, to_planes, PinnConfig, PinnError, PinnSample, TrainHyper};
use crate::autodiff::{Gradients, ParamStore, Tape, Tensor};
use crate::channel::ChannelTensor;

/// Step decay: `init_lr * gamma^floor(epoch / step_size)`, epochs counted from 0.
pub fn lr_at_epoch(hyper: &TrainHyper, epoch: usize) -> f64 {
    let decays = epoch / hyper.step_size.max(1);
    let mut lr = hyper.init_lr;
    for _ in 0..decays {
        lr *= hyper.gamma;
    }
    lr
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(store: &ParamStore, hyper: &TrainHyper) -> Self {
        let zeros: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.adam_eps,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in store.tensors.iter_mut().enumerate() {
            let Some(g) = grads.get(i) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean validation NMSE (linear ratios averaged, then dB).
    pub val_nmse_db: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

struct Batch {
    x: Tensor,
    crop: Tensor,
    truth: Tensor,
    phys: PhysicsBatch,
}

fn make_batch(params: &ModelParams, samples: &[&PinnSample], tx_power_w: f64) -> Result<Batch, PinnError> {
    let cfg = &params.config;
    let (x, crop, scales) = batch_inputs(cfg, samples)?;
    let l = cfg.multi_step;
    let per = cfg.in_channels() * cfg.nr * cfg.nt;
    let mut truth = Vec::with_capacity(samples.len() * l * per);
    let mut phys = PhysicsBatch {
        target: Vec::with_capacity(samples.len()),
        coeff: Vec::with_capacity(samples.len()),
    };
    for (s, &scale) in samples.iter().zip(&scales) {
        if s.targets.len() != l {
            return Err(PinnError::ShapeMismatch {
                expected: vec![l],
                got: vec![s.targets.len()],
            });
        }
        for h in &s.targets {
            check_channel(cfg, h)?;
            truth.extend(to_planes(h, scale));
        }
        phys.target.push(s.rss_power_w / params.power_norm);
        phys.coeff
            .push(params.kappa * tx_power_w * scale * scale / params.power_norm);
    }
    let n = samples.len();
    Ok(Batch {
        x,
        crop,
        truth: Tensor::new(&[n, l, cfg.in_channels(), cfg.nr, cfg.nt], truth),
        phys,
    })
}

/// Mean loss and mean linear NMSE over `samples`, evaluated in chunks.
fn evaluate(params: &ModelParams, samples: &[PinnSample], hyper: &TrainHyper) -> Result<(f64, f64), PinnError> {
    let (mut loss, mut nmse, mut pairs) = (0.0, 0.0, 0usize);
    let refs: Vec<&PinnSample> = samples.iter().collect();
    for chunk in refs.chunks(hyper.batch_size) {
        let b = make_batch(params, chunk, hyper.tx_power_w)?;
        let mut t = Tape::new();
        let net = Net::attach(params, &mut t);
        let x = t.constant(b.x);
        let c = t.constant(b.crop);
        let pred = forward(&mut t, &net, x, c)?;
        let lv = loss_total(&mut t, pred, &b.truth, Some(&b.phys), params.config.zeta)?;
        loss += t.value(lv).data[0] * chunk.len() as f64;
        let terms = nmse_terms(&t.value(pred).data, &b.truth.data, b.truth.shape[0] * b.truth.shape[1])?;
        nmse += terms.iter().sum::<f64>();
        pairs += terms.len();
    }
    Ok((loss / samples.len() as f64, nmse / pairs as f64))
}

/// Trains a fresh model on `train_set`, selecting the epoch with the lowest
/// validation loss (training loss when `val_set` is empty).
///
/// `kappa` is fitted once on the training targets and frozen; the power
/// normalization constant is the mean training RSS power.
pub fn train(
    train_set: &[PinnSample],
    val_set: &[PinnSample],
    cfg: &PinnConfig,
    hyper: &TrainHyper,
) -> Result<TrainOutcome, PinnError> {
    cfg.validate()?;
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(PinnError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut params = init_params(cfg, &mut rng)?;
    let p_em: Vec<f64> = train_set.iter().map(|s| s.rss_power_w).collect();
    let p_chan: Vec<f64> = train_set
        .iter()
        .map(|s| s.targets.first().map_or(0.0, |h| hyper.tx_power_w * h.norm_sqr()))
        .collect();
    params.kappa = calibrate_kappa(&p_em, &p_chan)?;
    params.power_norm = p_em.iter().sum::<f64>() / p_em.len() as f64;
    if !(params.power_norm > 0.0) || !params.kappa.is_finite() {
        return Err(PinnError::ZeroReference);
    }

    let mut adam = Adam::new(&params.store, hyper);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best = (f64::INFINITY, 0, params.clone());
    for epoch in 0..hyper.epochs {
        let lr = lr_at_epoch(hyper, epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, idx) in order.chunks(hyper.batch_size).enumerate() {
            let samples: Vec<&PinnSample> = idx.iter().map(|&i| &train_set[i]).collect();
            let b = make_batch(&params, &samples, hyper.tx_power_w)?;
            let mut t = Tape::new();
            let net = Net::attach(&params, &mut t);
            let x = t.constant(b.x);
            let c = t.constant(b.crop);
            let pred = forward(&mut t, &net, x, c)?;
            let lv = loss_total(&mut t, pred, &b.truth, Some(&b.phys), cfg.zeta)?;
            let loss = t.value(lv).data[0];
            if !loss.is_finite() {
                return Err(PinnError::NonFiniteLoss { epoch, batch: bi, loss });
            }
            total += loss * idx.len() as f64;
            let grads = t.backward(lv)?;
            drop(net);
            adam.step(&mut params.store, &grads, lr);
        }
        let train_loss = total / train_set.len() as f64;
        let (val_loss, val_nmse) = if val_set.is_empty() {
            (train_loss, f64::NAN)
        } else {
            evaluate(&params, val_set, hyper)?
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_nmse_db: crate::estimators::ratio_to_db(val_nmse),
            lr,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
        }
    }
    if history.is_empty() {
        best.2 = params;
    }
    Ok(TrainOutcome {
        params: best.2,
        history,
        best_epoch: best.1,
    })
}

/// Refines a batch of `(h_init, crop)` pairs; returns `L` snapshots per
/// input in channel units.
pub fn infer_batch(
    params: &ModelParams,
    inputs: &[(&ChannelTensor, &[f64])],
) -> Result<Vec<Vec<ChannelTensor>>, PinnError> {
    let cfg = &params.config;
    let samples: Vec<PinnSample> = inputs
        .iter()
        .map(|(h, c)| PinnSample {
            h_init: (*h).clone(),
            targets: Vec::new(),
            crop: c.to_vec(),
            rss_power_w: 0.0,
        })
        .collect();
    let refs: Vec<&PinnSample> = samples.iter().collect();
    let (x, crop, scales) = batch_inputs(cfg, &refs)?;
    let mut t = Tape::new();
    let net = Net::attach(params, &mut t);
    let x = t.constant(x);
    let c = t.constant(crop);
    let pred = forward(&mut t, &net, x, c)?;
    let data = &t.value(pred).data;
    let per = cfg.in_channels() * cfg.nr * cfg.nt;
    Ok(scales
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            (0..cfg.multi_step)
                .map(|l| {
                    let off = (i * cfg.multi_step + l) * per;
                    from_planes(&data[off..off + per], cfg.d_taps, cfg.nr, cfg.nt, s)
                })
                .collect()
        })
        .collect())
}

/// Forward pass for one input; no gradient state is kept.
pub fn infer(params: &ModelParams, h_init: &ChannelTensor, crop: &[f64]) -> Result<Vec<ChannelTensor>, PinnError> {
    Ok(infer_batch(params, &[(h_init, crop)])?.pop().unwrap_or_default())
}
