//! Estimation runs, sweeps and dataset splits.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mbce_core::channel::ChannelTensor;
use mbce_core::estimators::{nmse_linear, ratio_to_db, Estimator};

use crate::bundle::DatasetBundle;
use crate::checkpoint::{load_checkpoint, Checkpoint};
use crate::plot::{line_chart, Series};
use crate::training::{check_compatible, initial_estimate, refine};
use crate::{HarnessError, Result, THREADS_ENV};

pub const DEFAULT_N_FFT: usize = 64;
pub const DEFAULT_SOMP_GRID: usize = 256;
pub const DEFAULT_SOMP_SPARSITY: usize = 8;

/// An estimator named on the command line.
#[derive(Debug, Clone, PartialEq)]
pub enum MethodSpec {
    Classical(Estimator),
    Pinn(PathBuf),
}

impl FromStr for MethodSpec {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ls-interp" => MethodSpec::Classical(Estimator::LsInterp),
            "ls-dft" => MethodSpec::Classical(Estimator::LsDft),
            "ls-ofdm" => MethodSpec::Classical(Estimator::LsOfdm { n_fft: DEFAULT_N_FFT }),
            "somp" => MethodSpec::Classical(Estimator::Somp {
                grid_size: DEFAULT_SOMP_GRID,
                max_sparsity: DEFAULT_SOMP_SPARSITY,
            }),
            _ => match s.strip_prefix("pinn:") {
                Some(p) if !p.is_empty() => MethodSpec::Pinn(PathBuf::from(p)),
                _ => return Err(HarnessError::UnknownMethod(s.to_string())),
            },
        })
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MethodSpec::Classical(e) => f.write_str(&e.name().replace('_', "-")),
            MethodSpec::Pinn(p) => write!(f, "pinn:{}", p.display()),
        }
    }
}

/// A method ready to run: checkpoints are loaded once up front.
#[derive(Debug, Clone)]
pub enum Method {
    Classical(Estimator),
    Pinn { label: String, ckpt: Box<Checkpoint> },
}

impl Method {
    pub fn load(spec: &MethodSpec) -> Result<Self> {
        Ok(match spec {
            MethodSpec::Classical(e) => Method::Classical(*e),
            MethodSpec::Pinn(p) => Method::Pinn {
                label: spec.to_string(),
                ckpt: Box::new(load_checkpoint(p)?),
            },
        })
    }

    pub fn from_checkpoint(label: &str, ckpt: Checkpoint) -> Self {
        Method::Pinn {
            label: label.to_string(),
            ckpt: Box::new(ckpt),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Method::Classical(e) => MethodSpec::Classical(*e).to_string(),
            Method::Pinn { label, .. } => label.clone(),
        }
    }

    /// Size of the axis pilots are placed on.
    pub fn pilot_dim(&self, nt: usize) -> usize {
        let est = match self {
            Method::Classical(e) => e,
            Method::Pinn { ckpt, .. } => &ckpt.meta.init_method,
        };
        match est {
            Estimator::LsOfdm { n_fft } => *n_fft,
            _ => nt,
        }
    }
}

/// One estimate evaluated against one snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub sample_id: usize,
    pub method: String,
    pub np: usize,
    pub snr_db: f64,
    pub step: usize,
    pub nmse_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub step: usize,
    /// dB of the mean linear NMSE ratio.
    pub nmse_db: f64,
    /// Mean of the per-sample dB values, reported alongside.
    pub mean_of_db: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    pub rows: Vec<EstimateRow>,
    /// One entry per evaluated step.
    pub aggregates: Vec<Aggregate>,
    linear: Vec<f64>,
}

impl EstimateReport {
    pub fn aggregate(&self, step: usize) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.step == step)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner()
            .map_err(|e| HarnessError::io("estimate.csv", e.into_error()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRequest {
    pub pilots: usize,
    pub snr_db: f64,
    pub seed: u64,
    /// Snapshots to score: steps `0..horizon`.
    pub horizon: usize,
    /// Samples to evaluate; all when `None`.
    pub indices: Option<Vec<usize>>,
}

fn score(est: &ChannelTensor, truth: &ChannelTensor) -> Result<f64> {
    Ok(nmse_linear(est, truth)?)
}

/// Runs `method` on the selected samples and scores it on steps `0..horizon`.
///
/// Classical estimators only see step 0, so later steps compare that same
/// estimate with the moved channel. A PINN trained for `L` steps scores its
/// `s`-th output against step `s` (its last output beyond `L`).
pub fn run_estimate(bundle: &DatasetBundle, method: &Method, req: &EstimateRequest) -> Result<EstimateReport> {
    let m = &bundle.manifest;
    if req.horizon == 0 || req.horizon > m.steps {
        return Err(HarnessError::InvalidSpec(format!(
            "horizon {} outside 1..={}",
            req.horizon, m.steps
        )));
    }
    let indices: Vec<usize> = req.indices.clone().unwrap_or_else(|| (0..m.n_samples).collect());
    if let Some(&bad) = indices.iter().find(|&&i| i >= m.n_samples) {
        return Err(HarnessError::InvalidSpec(format!("sample {bad} out of range")));
    }
    let label = method.label();
    let predictions: Vec<Vec<ChannelTensor>> = match method {
        Method::Classical(e) => indices
            .iter()
            .map(|&i| Ok(vec![initial_estimate(bundle, i, e, req.pilots, req.snr_db, req.seed)?]))
            .collect::<Result<_>>()?,
        Method::Pinn { ckpt, .. } => {
            check_compatible(&ckpt.params, bundle)?;
            let inputs = indices
                .iter()
                .map(|&i| {
                    let h = initial_estimate(bundle, i, &ckpt.meta.init_method, req.pilots, req.snr_db, req.seed)?;
                    Ok((h, bundle.crops[i].clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            refine(&ckpt.params, &inputs)?
        }
    };
    let mut rows = Vec::with_capacity(indices.len() * req.horizon);
    let mut linear = Vec::with_capacity(rows.capacity());
    for step in 0..req.horizon {
        for (&i, preds) in indices.iter().zip(&predictions) {
            let est = &preds[step.min(preds.len() - 1)];
            let r = score(est, bundle.channel(i, step))?;
            linear.push(r);
            rows.push(EstimateRow {
                sample_id: i,
                method: label.clone(),
                np: req.pilots,
                snr_db: req.snr_db,
                step,
                nmse_db: ratio_to_db(r),
            });
        }
    }
    let n = indices.len();
    let aggregates = (0..req.horizon)
        .map(|step| {
            let lin = &linear[step * n..(step + 1) * n];
            let dbs = &rows[step * n..(step + 1) * n];
            Aggregate {
                step,
                nmse_db: ratio_to_db(lin.iter().sum::<f64>() / n.max(1) as f64),
                mean_of_db: dbs.iter().map(|r| r.nmse_db).sum::<f64>() / n.max(1) as f64,
                count: n,
            }
        })
        .collect();
    Ok(EstimateReport {
        rows,
        aggregates,
        linear,
    })
}

impl EstimateReport {
    /// Per-sample linear NMSE of `step`, in row order.
    pub fn linear(&self, step: usize) -> &[f64] {
        let n = self.aggregates.first().map_or(0, |a| a.count);
        &self.linear[step * n..(step + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SnrDb,
    PilotCount,
    PilotDensity,
    #[serde(rename = "horizon_L")]
    HorizonL,
}

impl SweepAxis {
    pub fn label(&self) -> &'static str {
        match self {
            SweepAxis::SnrDb => "snr_db",
            SweepAxis::PilotCount => "pilot_count",
            SweepAxis::PilotDensity => "pilot_density",
            SweepAxis::HorizonL => "horizon_L",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    /// Pilot count when the axis is not about pilots.
    #[serde(default = "default_pilots")]
    pub pilots: usize,
    #[serde(default)]
    pub snr_db: f64,
    #[serde(default)]
    pub indices: Option<Vec<usize>>,
}

fn default_pilots() -> usize {
    16
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(HarnessError::InvalidSpec(m.to_string()));
        if self.values.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return err("sweep values, methods and seeds must be non-empty");
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return err("sweep values must be finite");
        }
        let integral = |v: f64| v >= 1.0 && v.fract() == 0.0;
        match self.axis {
            SweepAxis::PilotDensity if self.values.iter().any(|&v| !(v > 0.0 && v <= 1.0)) => {
                err("pilot densities must lie in (0, 1]")
            }
            SweepAxis::PilotCount | SweepAxis::HorizonL if !self.values.iter().all(|&v| integral(v)) => {
                err("pilot counts and horizons must be positive integers")
            }
            _ if self.pilots == 0 => err("pilot count must be positive"),
            _ => Ok(()),
        }
    }
}

/// One `(value, method, seed)` cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub method: String,
    pub seed: u64,
    pub np: usize,
    pub snr_db: f64,
    pub step: usize,
    pub nmse_db: f64,
    pub mean_of_db: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner()
            .map_err(|e| HarnessError::io("sweep.csv", e.into_error()))
    }

    /// Per-method curves: dB of the seed-averaged linear NMSE at each value.
    pub fn curves(&self) -> Vec<Series> {
        let mut by_method: BTreeMap<&str, BTreeMap<u64, (f64, f64, usize)>> = BTreeMap::new();
        for r in &self.rows {
            let e = by_method
                .entry(&r.method)
                .or_default()
                .entry(r.value.to_bits())
                .or_insert((r.value, 0.0, 0));
            e.1 += 10f64.powf(r.nmse_db / 10.0);
            e.2 += 1;
        }
        // Keep the order in which methods first appear in the spec.
        let mut order: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.method.as_str()) {
                order.push(&r.method);
            }
        }
        order
            .into_iter()
            .map(|m| {
                let mut pts: Vec<(f64, f64)> = by_method[m]
                    .values()
                    .map(|&(x, sum, n)| (x, ratio_to_db(sum / n as f64)))
                    .collect();
                pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    name: m.to_string(),
                    points: pts,
                }
            })
            .collect()
    }

    pub fn to_svg(&self, axis: SweepAxis) -> String {
        line_chart(
            &format!("NMSE vs {}", axis.label()),
            axis.label(),
            "NMSE (dB)",
            &self.curves(),
        )
    }
}

/// Rayon pool sized by [`THREADS_ENV`] (default 1).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| HarnessError::InvalidSpec(format!("thread pool: {e}")))
}

/// Evaluates every `(value, method, seed)` cell. Cells run in parallel and
/// are collected in spec order, so the output does not depend on the
/// thread count.
pub fn run_sweep(bundle: &DatasetBundle, spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let methods = spec
        .methods
        .iter()
        .map(|m| Method::load(&m.parse()?))
        .collect::<Result<Vec<_>>>()?;
    run_sweep_with(bundle, spec, &methods)
}

/// [`run_sweep`] with methods already loaded (labels come from the methods).
pub fn run_sweep_with(bundle: &DatasetBundle, spec: &SweepSpec, methods: &[Method]) -> Result<SweepResult> {
    spec.validate()?;
    let mut cells = Vec::new();
    for &value in &spec.values {
        for method in methods {
            for &seed in &spec.seeds {
                cells.push((value, method, seed));
            }
        }
    }
    let nt = bundle.manifest.nt;
    let run = |&(value, method, seed): &(f64, &Method, u64)| -> Result<SweepRow> {
        let (mut pilots, mut snr_db, mut step) = (spec.pilots, spec.snr_db, 0usize);
        match spec.axis {
            SweepAxis::SnrDb => snr_db = value,
            SweepAxis::PilotCount => pilots = value as usize,
            SweepAxis::PilotDensity => {
                pilots = ((value * method.pilot_dim(nt) as f64).round() as usize).max(1);
            }
            SweepAxis::HorizonL => step = value as usize - 1,
        }
        let req = EstimateRequest {
            pilots,
            snr_db,
            seed,
            horizon: step + 1,
            indices: spec.indices.clone(),
        };
        let rep = run_estimate(bundle, method, &req)?;
        let agg = rep.aggregates[step];
        Ok(SweepRow {
            axis: spec.axis.label().to_string(),
            value,
            method: method.label(),
            seed,
            np: pilots,
            snr_db,
            step,
            nmse_db: agg.nmse_db,
            mean_of_db: agg.mean_of_db,
            samples: agg.count,
        })
    };
    let pool = thread_pool()?;
    let rows = pool.install(|| cells.par_iter().map(run).collect::<Result<Vec<_>>>())?;
    Ok(SweepResult { rows })
}

/// Writes `sweep_<axis>.csv` and `sweep_<axis>.svg` into `dir`.
pub fn write_sweep(result: &SweepResult, axis: SweepAxis, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let csv_path = dir.join(format!("sweep_{}.csv", axis.label()));
    let svg_path = dir.join(format!("sweep_{}.svg", axis.label()));
    std::fs::write(&csv_path, result.to_csv()?).map_err(|e| HarnessError::io(&csv_path, e))?;
    std::fs::write(&svg_path, result.to_svg(axis)).map_err(|e| HarnessError::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum SplitPolicy {
    Random,
    /// Samples are grouped into square map blocks and whole blocks are
    /// shuffled, so only the blocks straddling a boundary are shared.
    SpatialBlock {
        block_m: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 80/10/10 split of the bundle's samples.
pub fn split_indices(bundle: &DatasetBundle, policy: SplitPolicy, seed: u64) -> Result<Split> {
    let n = bundle.manifest.n_samples;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let order: Vec<usize> = match policy {
        SplitPolicy::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx
        }
        SplitPolicy::SpatialBlock { block_m } => {
            if !(block_m > 0.0) {
                return Err(HarnessError::NonPositiveInput("block size"));
            }
            let mut blocks: BTreeMap<(i64, i64), Vec<usize>> = BTreeMap::new();
            for (i, loc) in bundle.locations.iter().enumerate() {
                let key = ((loc.x_m / block_m).floor() as i64, (loc.y_m / block_m).floor() as i64);
                blocks.entry(key).or_default().push(i);
            }
            let mut groups: Vec<Vec<usize>> = blocks.into_values().collect();
            groups.shuffle(&mut rng);
            groups.into_iter().flatten().collect()
        }
    };
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..(n_train + n_val).min(n)].to_vec();
    let mut test = order[(n_train + n_val).min(n)..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train, val, test })
}
