//! `rpgssm` — reproducible pipelines over the library: generate synthetic
//! datasets, train by generalized EM, probe posterior means with a linear
//! readout, and forecast beyond a smoothed context window.
//!
//! Exit codes: 0 success, 2 usage or invalid configuration, 3 I/O failure,
//! 4 numeric failure, 5 shape mismatch between artifacts.

mod artifacts;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use artifacts::{ModelManifest, StoredDataset, Task};
use rpgssm::data::{derive_seed, gen_linear, gen_pendulum};
use rpgssm::eval::{fit_r2, rollout_predict, smoothed_means};
use rpgssm::trainer::{train, write_metrics_csv};

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Io(String),
    Numeric(String),
    Shape(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numeric(_) => 4,
            Failure::Shape(_) => 5,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Io(m) | Failure::Numeric(m) | Failure::Shape(m) => m,
        }
    }
}

impl From<rpgssm::Error> for Failure {
    fn from(e: rpgssm::Error) -> Self {
        match &e {
            rpgssm::Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            rpgssm::Error::DimensionMismatch(_) => Failure::Shape(e.to_string()),
            _ => Failure::Numeric(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "rpgssm", version, about = "Recognition-parametrized Gaussian state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset under a path prefix.
    Generate(GenerateArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Fit the posterior-mean linear readout and report held-out R².
    Eval(EvalArgs),
    /// Smooth a context window, then forecast with the mean dynamics.
    Rollout(RolloutArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Synthetic task.
    #[arg(long, value_enum)]
    task: Task,
    /// Latent dimension (linear task only).
    #[arg(long)]
    dz: Option<usize>,
    /// Observation dimension (linear task only).
    #[arg(long)]
    dx: Option<usize>,
    /// Square frame side in pixels (pendulum task only).
    #[arg(long)]
    img: Option<usize>,
    /// Number of sequences.
    #[arg(long)]
    n: usize,
    /// Steps per sequence.
    #[arg(long)]
    t: usize,
    /// Master seed.
    #[arg(long)]
    seed: u64,
    /// Output prefix; writes <out>.obs.rpgt, <out>.truth.rpgt, <out>.meta.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Dataset path prefix (as written by `generate`).
    #[arg(long)]
    data: PathBuf,
    /// Model output prefix; writes <out>.manifest.json and <out>.params.rpgt.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV output path.
    #[arg(long)]
    metrics: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model path prefix (as written by `train`).
    #[arg(long)]
    model: PathBuf,
    /// Dataset path prefix.
    #[arg(long)]
    data: PathBuf,
    /// Report CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Regress the ground truth on itself instead of on posterior means.
    #[arg(long, conflicts_with = "shuffle")]
    oracle: bool,
    /// Null control: globally permute feature columns before fitting.
    #[arg(long)]
    shuffle: bool,
    /// Seed for the 80/20 sequence split (and the shuffle control).
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct RolloutArgs {
    /// Model path prefix.
    #[arg(long)]
    model: PathBuf,
    /// Dataset path prefix.
    #[arg(long)]
    data: PathBuf,
    /// Observed steps to smooth before forecasting.
    #[arg(long)]
    context: usize,
    /// Steps to forecast past the context.
    #[arg(long)]
    horizon: usize,
    /// Rollout CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the readout's 80/20 sequence split.
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Rollout(args) => cmd_rollout(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            ExitCode::from(failure.code())
        }
    }
}

fn cmd_generate(args: GenerateArgs) -> Result<(), Failure> {
    let dataset = match args.task {
        Task::Linear => {
            let dz = args
                .dz
                .ok_or_else(|| Failure::Usage("--dz is required for the linear task".into()))?;
            let dx = args
                .dx
                .ok_or_else(|| Failure::Usage("--dx is required for the linear task".into()))?;
            if args.img.is_some() {
                return Err(Failure::Usage("--img applies only to the pendulum task".into()));
            }
            gen_linear(dz, dx, args.n, args.t, args.seed)?
        }
        Task::Pendulum => {
            let img = args.img.ok_or_else(|| {
                Failure::Usage("--img is required for the pendulum task".into())
            })?;
            if args.dz.is_some() || args.dx.is_some() {
                return Err(Failure::Usage(
                    "--dz/--dx apply only to the linear task".into(),
                ));
            }
            gen_pendulum(args.n, args.t, args.seed, img)?
        }
    };
    artifacts::write_dataset(&args.out, &dataset)
}

fn cmd_train(args: TrainArgs) -> Result<(), Failure> {
    let run_config = artifacts::read_run_config(&args.config)?;
    let data = artifacts::read_dataset(&args.data)?;
    if run_config.task.name() != data.meta.generator {
        return Err(Failure::Usage(format!(
            "config task '{}' does not match the dataset generator '{}'",
            run_config.task.name(),
            data.meta.generator
        )));
    }
    let train_config = run_config.to_train_config()?;
    let (state, rows) = train(&train_config, &data.observations)?;

    artifacts::ensure_parent(&args.metrics)?;
    let file = File::create(&args.metrics)
        .map_err(|e| Failure::Io(format!("{}: {e}", args.metrics.display())))?;
    let mut w = BufWriter::new(file);
    write_metrics_csv(&mut w, &rows)
        .and_then(|()| w.flush())
        .map_err(|e| Failure::Io(format!("{}: {e}", args.metrics.display())))?;

    artifacts::write_model(&args.out, &state, run_config.task)
}

fn check_compat(manifest: &ModelManifest, data: &StoredDataset) -> Result<(), Failure> {
    let d_x = data.observations.first().map_or(0, DMatrix::nrows);
    if d_x != manifest.input_dim {
        return Err(Failure::Shape(format!(
            "model expects {}-dimensional observations, dataset has {d_x}",
            manifest.input_dim
        )));
    }
    Ok(())
}

/// Destroy the feature/target alignment by permuting all feature columns
/// across every (sequence, time) slot.
fn shuffle_feature_columns(features: &mut [DMatrix<f64>], seed: u64) {
    let mut columns: Vec<DVector<f64>> = features
        .iter()
        .flat_map(|f| f.column_iter().map(|c| c.into_owned()).collect::<Vec<_>>())
        .collect();
    columns.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let mut next = columns.into_iter();
    for f in features.iter_mut() {
        for t in 0..f.ncols() {
            f.set_column(t, &next.next().expect("one column per slot"));
        }
    }
}

fn cmd_eval(args: EvalArgs) -> Result<(), Failure> {
    let (state, manifest) = artifacts::read_model(&args.model)?;
    let data = artifacts::read_dataset(&args.data)?;
    check_compat(&manifest, &data)?;

    let mut features = if args.oracle {
        data.ground_truth.clone()
    } else {
        smoothed_means(&state.prior, &state.recognition, &data.observations)?
    };
    if args.shuffle {
        shuffle_feature_columns(&mut features, derive_seed(args.split_seed, "eval/shuffle"));
    }
    let report = fit_r2(&features, &data.ground_truth, args.split_seed)?;

    artifacts::ensure_parent(&args.out)?;
    let file = File::create(&args.out)
        .map_err(|e| Failure::Io(format!("{}: {e}", args.out.display())))?;
    let mut w = BufWriter::new(file);
    report
        .write_csv(&mut w)
        .and_then(|()| w.flush())
        .map_err(|e| Failure::Io(format!("{}: {e}", args.out.display())))?;

    println!("mean_r2={}", report.mean_r2);
    Ok(())
}

fn write_rollout_row<W: Write>(
    w: &mut W,
    seq: usize,
    t: usize,
    kind: &str,
    values: nalgebra::DVectorView<'_, f64>,
) -> std::io::Result<()> {
    write!(w, "{seq},{t},{kind}")?;
    for v in values.iter() {
        write!(w, ",{v}")?;
    }
    writeln!(w)
}

fn cmd_rollout(args: RolloutArgs) -> Result<(), Failure> {
    let (state, manifest) = artifacts::read_model(&args.model)?;
    let data = artifacts::read_dataset(&args.data)?;
    check_compat(&manifest, &data)?;
    let t_len = data.observations.first().map_or(0, DMatrix::ncols);
    if args.context == 0 {
        return Err(Failure::Usage("--context must be at least 1".into()));
    }
    if args.context + args.horizon > t_len {
        return Err(Failure::Usage(format!(
            "context {} + horizon {} exceeds the {t_len}-step sequences",
            args.context, args.horizon
        )));
    }

    // Readout from posterior means to targets, fitted on the full sequences.
    let features = smoothed_means(&state.prior, &state.recognition, &data.observations)?;
    let report = fit_r2(&features, &data.ground_truth, args.split_seed)?;

    artifacts::ensure_parent(&args.out)?;
    let file = File::create(&args.out)
        .map_err(|e| Failure::Io(format!("{}: {e}", args.out.display())))?;
    let mut w = BufWriter::new(file);
    let io_fail = |e: std::io::Error| Failure::Io(format!("{}: {e}", args.out.display()));

    let d_g = data.ground_truth.first().map_or(0, DMatrix::nrows);
    write!(w, "seq,t,kind").map_err(io_fail)?;
    for g in 0..d_g {
        write!(w, ",y{g}").map_err(io_fail)?;
    }
    writeln!(w).map_err(io_fail)?;

    for (s, seq) in data.observations.iter().enumerate() {
        let context = seq.columns(0, args.context).into_owned();
        let context_means =
            smoothed_means(&state.prior, &state.recognition, &[context])?.pop().expect("one");
        let context_preds = report.predict(&context_means);
        for t in 0..args.context {
            write_rollout_row(&mut w, s, t, "context", context_preds.column(t).as_view())
                .map_err(io_fail)?;
        }
        let latents = rollout_predict(&state, seq, args.context, args.horizon)?;
        let preds = report.predict(&latents.transpose());
        for k in 0..args.horizon {
            write_rollout_row(
                &mut w,
                s,
                args.context + k,
                "predicted",
                preds.column(k).as_view(),
            )
            .map_err(io_fail)?;
        }
    }
    w.flush().map_err(io_fail)?;
    Ok(())
}
