use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use mbce::bundle::{load_bundle, save_bundle};
use mbce::checkpoint::save_checkpoint;
use mbce::dataset::{generate_dataset, GenConfig};
use mbce::experiments::{
    run_estimate, run_sweep, split_indices, write_sweep, EstimateRequest, Method, MethodSpec, SweepResult, SweepRow,
    SweepSpec,
};
use mbce::plot::{line_chart, Series};
use mbce::training::{run_training, TrainSpec};
use mbce::{HarnessError, Result};
use mbce_core::propagation::Scene;

#[derive(Parser)]
#[command(name = "mbce", version, about = "Model-based channel estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (or file for `train` and `plot`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Bundle directory written by `gen`.
    #[arg(long)]
    bundle: PathBuf,
    /// ls-interp, ls-dft, ls-ofdm, somp or pinn:<checkpoint>.
    #[arg(long, default_value = "ls-ofdm")]
    method: String,
    #[arg(long = "snr-db", default_value_t = 0.0, allow_hyphen_values = true)]
    snr_db: f64,
    #[arg(long, default_value_t = 16)]
    pilots: usize,
    /// Number of snapshots to score.
    #[arg(long, default_value_t = 1)]
    horizon: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset bundle from a generator or scene JSON.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Sample count when `--config` is absent or holds only a scene.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Per-sample NMSE of one method.
    Estimate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EstimateArgs,
    },
    /// Train a PINN checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Score a method on one split of the bundle.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: EstimateArgs,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Split seed and policy come from this training config, if given.
        #[arg(long)]
        train_config: Option<PathBuf>,
    },
    /// Run a sweep spec, writing a CSV and an SVG.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Re-render a sweep CSV as SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::Io {
        path: path.into(),
        source: e,
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::Io {
            path: dir.into(),
            source: e,
        })?;
    }
    fs::write(path, bytes).map_err(|e| HarnessError::Io {
        path: path.into(),
        source: e,
    })
}

fn out_or(common: &Common, default: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn gen_config(common: &Common, samples: usize) -> Result<GenConfig> {
    let Some(path) = &common.config else {
        return Ok(GenConfig::desk(samples, common.seed));
    };
    let value: serde_json::Value = read_json(path)?;
    let mut cfg = if value.get("scene").is_some() {
        serde_json::from_value::<GenConfig>(value)?
    } else {
        let scene: Scene = serde_json::from_value(value)?;
        GenConfig {
            scene,
            ..GenConfig::desk(samples, common.seed)
        }
    };
    cfg.seed = common.seed;
    Ok(cfg)
}

fn estimate_request(args: &EstimateArgs, seed: u64, indices: Option<Vec<usize>>) -> EstimateRequest {
    EstimateRequest {
        pilots: args.pilots,
        snr_db: args.snr_db,
        seed,
        horizon: args.horizon,
        indices,
    }
}

fn summary(label: &str, rep: &mbce::experiments::EstimateReport) {
    for a in &rep.aggregates {
        println!(
            "{label} step {}: NMSE {:.3} dB (mean of dB {:.3}) over {} samples",
            a.step, a.nmse_db, a.mean_of_db, a.count
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common, samples } => {
            let cfg = gen_config(&common, samples)?;
            let bundle = generate_dataset(&cfg)?;
            let out = out_or(&common, "bundle");
            save_bundle(&bundle, &out)?;
            println!(
                "wrote {} samples to {} (hash {})",
                bundle.manifest.n_samples,
                out.display(),
                bundle.content_hash()?
            );
        }
        Command::Estimate { common, args } => {
            let bundle = load_bundle(&args.bundle)?;
            let method = Method::load(&args.method.parse::<MethodSpec>()?)?;
            let rep = run_estimate(&bundle, &method, &estimate_request(&args, common.seed, None))?;
            let out = out_or(&common, "results").join("estimate.csv");
            write(&out, rep.to_csv()?)?;
            summary(&method.label(), &rep);
        }
        Command::Train { common, bundle } => {
            let bundle = load_bundle(&bundle)?;
            let mut spec = match &common.config {
                Some(p) => read_json::<TrainSpec>(p)?,
                None => TrainSpec::desk(vec![2, 4, 8, 16, 32, 64]),
            };
            spec.hyper.seed = common.seed;
            let run = run_training(&bundle, &spec)?;
            let out = out_or(&common, "model.ckpt");
            save_checkpoint(&run.checkpoint, &out)?;
            write(
                &out.with_extension("history.json"),
                serde_json::to_vec_pretty(&run.history)?,
            )?;
            println!(
                "best epoch {} of {}; wrote {}",
                run.best_epoch,
                run.history.len(),
                out.display()
            );
        }
        Command::Eval {
            common,
            args,
            split,
            train_config,
        } => {
            let bundle = load_bundle(&args.bundle)?;
            let method = Method::load(&args.method.parse::<MethodSpec>()?)?;
            let spec = match &train_config {
                Some(p) => read_json::<TrainSpec>(p)?,
                None => TrainSpec::desk(vec![args.pilots]),
            };
            let parts = split_indices(&bundle, spec.split, spec.split_seed)?;
            let indices = match split {
                SplitName::Train => Some(parts.train),
                SplitName::Val => Some(parts.val),
                SplitName::Test => Some(parts.test),
                SplitName::All => None,
            };
            let req = estimate_request(&args, common.seed, indices);
            let rep = run_estimate(&bundle, &method, &req)?;
            summary(&method.label(), &rep);
            if let Method::Pinn { ckpt, .. } = &method {
                let base = Method::Classical(ckpt.meta.init_method);
                summary(&base.label(), &run_estimate(&bundle, &base, &req)?);
            }
            let out = out_or(&common, "results").join("eval.csv");
            write(&out, rep.to_csv()?)?;
        }
        Command::Sweep { common, bundle } => {
            let bundle = load_bundle(&bundle)?;
            let path = common
                .config
                .as_ref()
                .ok_or_else(|| HarnessError::InvalidSpec("sweep needs --config <spec.json>".into()))?;
            let spec: SweepSpec = read_json(path)?;
            let result = run_sweep(&bundle, &spec)?;
            let (csv, svg) = write_sweep(&result, spec.axis, &out_or(&common, "results"))?;
            println!("wrote {} and {}", csv.display(), svg.display());
        }
        Command::Plot { common, input } => {
            let mut reader = csv::Reader::from_path(&input)?;
            let rows = reader
                .deserialize()
                .collect::<std::result::Result<Vec<SweepRow>, _>>()?;
            let axis = rows
                .first()
                .map(|r| r.axis.clone())
                .ok_or_else(|| HarnessError::InvalidSpec("empty sweep CSV".into()))?;
            let curves: Vec<Series> = SweepResult { rows }.curves();
            let svg = line_chart(&format!("NMSE vs {axis}"), &axis, "NMSE (dB)", &curves);
            let out = out_or(&common, "plot.svg");
            write(&out, svg)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
