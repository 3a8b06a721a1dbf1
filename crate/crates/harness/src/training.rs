//! Turning bundles into PINN training sets, and applying trained models.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mbce_core::channel::ChannelTensor;
use mbce_core::estimators::{observe, Estimator};
use mbce_core::pinn::{
    infer_batch, train, EpochRecord, ModelParams, PinnConfig, PinnSample, RssPowerSource, TrainHyper,
};

use crate::bundle::DatasetBundle;
use crate::checkpoint::{Checkpoint, TrainMeta};
use crate::experiments::{split_indices, Split, SplitPolicy};
use crate::{HarnessError, Result};

/// Noise realization for one sample: stream `sample_id` of `seed`, so every
/// method and SNR sees the same draws for the same sample.
pub fn sample_rng(seed: u64, sample_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(sample_id as u64);
    rng
}

/// Pilots, noise and estimate for step 0 of sample `i`.
pub fn initial_estimate(
    bundle: &DatasetBundle,
    i: usize,
    method: &Estimator,
    pilots: usize,
    snr_db: f64,
    seed: u64,
) -> Result<ChannelTensor> {
    let h = bundle.channel(i, 0);
    let pattern = method.pilot_pattern(h.nt(), pilots)?;
    let obs = observe(h, &pattern, snr_db, &mut sample_rng(seed, i))?;
    Ok(method.estimate(&obs, &bundle.array())?)
}

/// How PINN inputs are derived from a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    pub init: Estimator,
    /// Pilot counts assigned to samples cyclically.
    pub pilots: Vec<usize>,
    pub snr_db: f64,
    pub noise_seed: u64,
    pub multi_step: usize,
    pub rss_power_source: RssPowerSource,
}

impl SampleSpec {
    pub fn pilots_for(&self, position: usize) -> usize {
        self.pilots[position % self.pilots.len()]
    }
}

/// The network shape matching a bundle's dimensions.
pub fn config_for(bundle: &DatasetBundle, base: &PinnConfig) -> PinnConfig {
    let m = &bundle.manifest;
    PinnConfig {
        d_taps: m.d_taps,
        nr: m.nr,
        nt: m.nt,
        crop_px: m.crop_px,
        ..base.clone()
    }
}

/// Builds one [`PinnSample`] per index; the `k`-th index uses
/// `spec.pilots_for(k)` pilots.
pub fn build_samples(bundle: &DatasetBundle, indices: &[usize], spec: &SampleSpec) -> Result<Vec<PinnSample>> {
    if spec.pilots.is_empty() {
        return Err(HarnessError::InvalidSpec("no pilot counts".into()));
    }
    if spec.multi_step == 0 || spec.multi_step > bundle.manifest.steps {
        return Err(HarnessError::InvalidSpec(format!(
            "{} prediction steps requested, bundle has {}",
            spec.multi_step, bundle.manifest.steps
        )));
    }
    indices
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let h_init = initial_estimate(bundle, i, &spec.init, spec.pilots_for(k), spec.snr_db, spec.noise_seed)?;
            let loc = &bundle.locations[i];
            Ok(PinnSample {
                h_init,
                targets: (0..spec.multi_step).map(|s| bundle.channel(i, s).clone()).collect(),
                crop: bundle.crops[i].clone(),
                rss_power_w: match spec.rss_power_source {
                    RssPowerSource::CenterPixel => loc.rss_center_w,
                    RssPowerSource::CropMean => loc.rss_crop_mean_w,
                },
            })
        })
        .collect()
}

/// Refines initial estimates with a trained model, in chunks to bound memory.
pub fn refine(params: &ModelParams, inputs: &[(ChannelTensor, Vec<f64>)]) -> Result<Vec<Vec<ChannelTensor>>> {
    const CHUNK: usize = 16;
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(CHUNK) {
        let refs: Vec<(&ChannelTensor, &[f64])> = chunk.iter().map(|(h, c)| (h, c.as_slice())).collect();
        out.extend(infer_batch(params, &refs)?);
    }
    Ok(out)
}

/// Checks a model against a bundle's dimensions.
pub fn check_compatible(params: &ModelParams, bundle: &DatasetBundle) -> Result<()> {
    let c = &params.config;
    let m = &bundle.manifest;
    let got = (c.d_taps, c.nr, c.nt, c.crop_px);
    let want = (m.d_taps, m.nr, m.nt, m.crop_px);
    if got != want {
        return Err(HarnessError::CheckpointShapeMismatch(format!(
            "model (D, Nr, Nt, crop) = {got:?}, bundle = {want:?}"
        )));
    }
    if c.multi_step > m.steps {
        return Err(HarnessError::CheckpointShapeMismatch(format!(
            "model predicts {} steps, bundle has {}",
            c.multi_step, m.steps
        )));
    }
    Ok(())
}

/// Everything `train` needs beyond the bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub pinn: PinnConfig,
    pub hyper: TrainHyper,
    pub init: Estimator,
    pub pilots: Vec<usize>,
    /// Use every training position once per pilot count instead of cycling.
    #[serde(default)]
    pub replicate: bool,
    pub snr_db: f64,
    #[serde(default)]
    pub noise_seed: u64,
    pub split: SplitPolicy,
    #[serde(default)]
    pub split_seed: u64,
}

impl TrainSpec {
    /// Desk-scale network on LS-OFDM inputs at 0 dB.
    pub fn desk(pilots: Vec<usize>) -> Self {
        TrainSpec {
            pinn: PinnConfig::desk_scale(),
            hyper: TrainHyper {
                batch_size: 16,
                epochs: 40,
                step_size: 20,
                ..TrainHyper::default()
            },
            init: Estimator::LsOfdm {
                n_fft: crate::experiments::DEFAULT_N_FFT,
            },
            pilots,
            replicate: false,
            snr_db: 0.0,
            noise_seed: 0,
            split: SplitPolicy::Random,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub split: Split,
}

/// Splits the bundle, builds inputs and trains. Validation inputs use a
/// noise seed distinct from the training one.
pub fn run_training(bundle: &DatasetBundle, spec: &TrainSpec) -> Result<TrainRun> {
    let split = split_indices(bundle, spec.split, spec.split_seed)?;
    let cfg = config_for(bundle, &spec.pinn);
    let sample_spec = SampleSpec {
        init: spec.init,
        pilots: spec.pilots.clone(),
        snr_db: spec.snr_db,
        noise_seed: spec.noise_seed,
        multi_step: cfg.multi_step,
        rss_power_source: cfg.rss_power_source,
    };
    let train_idx: Vec<usize> = if spec.replicate {
        split
            .train
            .iter()
            .flat_map(|&i| std::iter::repeat_n(i, spec.pilots.len()))
            .collect()
    } else {
        split.train.clone()
    };
    let train_set = build_samples(bundle, &train_idx, &sample_spec)?;
    let val_spec = SampleSpec {
        noise_seed: spec.noise_seed.wrapping_add(1),
        ..sample_spec
    };
    let val_set = build_samples(bundle, &split.val, &val_spec)?;
    let out = train(&train_set, &val_set, &cfg, &spec.hyper)?;
    Ok(TrainRun {
        checkpoint: Checkpoint {
            params: out.params,
            meta: TrainMeta {
                init_method: spec.init,
                pilots: spec.pilots.clone(),
                snr_db: spec.snr_db,
            },
        },
        history: out.history,
        best_epoch: out.best_epoch,
        split,
    })
}
