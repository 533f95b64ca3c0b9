//! `fluid`: dataset generation, training, evaluation, verification suites
//! and forward-pass benchmarks.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fluid_core::bench::{bench_config, BenchConfig, BenchReport};
use fluid_core::data::{event_encode, generate_spirals, read_sequences_csv, segment_samples, write_sequences_csv, SpiralSpec};
use fluid_core::experiments::{fit_and_score, holdout_split, SpiralExperiment};
use fluid_core::model::load_checkpoint;
use fluid_core::train::{evaluate, write_history_csv, LossKind, Sample};
use fluid_core::verify::run_suite;
use fluid_core::Error;

const SEED_ENV: &str = "FLUID_SEED";

#[derive(Parser)]
#[command(name = "fluid", version, about = "Liquid attention: data, training, verification and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as CSV.
    Generate {
        #[command(subcommand)]
        kind: Generate,
    },
    /// Train on spirals and report held-out MAE.
    Train(TrainArgs),
    /// Score a checkpoint on a spiral dataset.
    Eval(EvalArgs),
    /// Run the dynamics and limit suites; exit 1 if any check fails.
    Verify(VerifyArgs),
    /// Time encoder forward passes and report peak tensor memory.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum Generate {
    /// Noisy, irregularly subsampled Archimedean spirals.
    Spiral {
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 150)]
        points: usize,
        #[arg(long, default_value_t = 50)]
        subsample: usize,
        #[arg(long, default_value_t = 0.02)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random starting angle per spiral.
        #[arg(long)]
        random_phase: bool,
        #[arg(long, default_value = "spirals.csv")]
        out: PathBuf,
    },
    /// Run-length event sequences from a CSV of pixel rows (one sequence per row).
    Events {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 128.0)]
        threshold: f64,
        #[arg(long)]
        pad_to: usize,
        #[arg(long, default_value = "events.csv")]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Experiment JSON (data, model, train, train_fraction); desk-scale defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Spiral CSV; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    /// Cross-validation folds; 1 uses the configured held-out split.
    #[arg(long, default_value_t = 1)]
    folds: usize,
    /// Freeze gates to the softmax-attention limit.
    #[arg(long)]
    frozen: bool,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Experiment JSON supplying the segment split and time scale.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Invariance,
    Stability,
    Limits,
    All,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Invariance => "invariance",
            Suite::Stability => "stability",
            Suite::Limits => "limits",
            Suite::All => "all",
        }
    }
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "all")]
    suite: Suite,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct BenchArgs {
    /// Bench JSON (name, d_model, heads, batch, seq_len, top_k, ...).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    reps: Option<usize>,
    /// Print the full report as JSON instead of CSV.
    #[arg(long)]
    json: bool,
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?,
        )),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => bail!("{SEED_ENV}: {e}"),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn experiment(config: Option<&Path>) -> anyhow::Result<SpiralExperiment> {
    Ok(match config {
        Some(p) => read_json(p)?,
        None => SpiralExperiment::desk_scale(),
    })
}

fn generate(kind: Generate) -> anyhow::Result<()> {
    match kind {
        Generate::Spiral {
            n,
            points,
            subsample,
            noise,
            seed,
            random_phase,
            out,
        } => {
            let mut spec = SpiralSpec::new(n, points, subsample, env_seed()?.unwrap_or(seed));
            spec.noise_std = noise;
            spec.random_phase = random_phase;
            let seqs: Vec<_> = generate_spirals(&spec)?.into_iter().map(|s| s.points).collect();
            write_sequences_csv(&seqs, &out)?;
            eprintln!("wrote {} spirals to {}", seqs.len(), out.display());
        }
        Generate::Events {
            input,
            threshold,
            pad_to,
            out,
        } => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(false)
                .from_path(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let mut seqs = Vec::new();
            for (row, rec) in reader.records().enumerate() {
                let rec = rec?;
                let pixels = rec
                    .iter()
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<Vec<_>, _>>()
                    .with_context(|| format!("row {row} of {}", input.display()))?;
                seqs.push(event_encode(&pixels, threshold, pad_to)?);
            }
            write_sequences_csv(&seqs, &out)?;
            eprintln!("wrote {} event sequences to {}", seqs.len(), out.display());
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct FoldResult {
    fold: usize,
    train_samples: usize,
    test_samples: usize,
    test_mae: f64,
    best_epoch: Option<usize>,
}

#[derive(Serialize)]
struct TrainSummary {
    frozen: bool,
    seed: u64,
    folds: Vec<FoldResult>,
    mean_test_mae: f64,
}

fn train_cmd(args: TrainArgs) -> anyhow::Result<()> {
    let mut exp = experiment(args.config.as_deref())?;
    if let Some(seed) = env_seed()? {
        exp.data.seed = seed;
        exp.train.seed = seed;
        exp.model.seed = seed;
    }
    if let Some(e) = args.epochs {
        exp.train.epochs = e;
    }
    if args.folds == 0 {
        bail!("--folds must be at least 1");
    }
    let seqs = match &args.data {
        Some(p) => read_sequences_csv(p)?,
        None => generate_spirals(&exp.data)?.into_iter().map(|s| s.points).collect(),
    };
    let samples = segment_samples(&exp.data, &seqs)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let seed = exp.train.seed;
    let mut folds = Vec::new();
    let splits: Vec<(Vec<Sample>, Vec<Sample>)> = if args.folds == 1 {
        let (a, b) = holdout_split(&samples, exp.train_fraction)?;
        vec![(a.to_vec(), b.to_vec())]
    } else {
        if args.folds > samples.len() {
            bail!("{} folds for {} sequences", args.folds, samples.len());
        }
        (0..args.folds)
            .map(|f| {
                let (test, train): (Vec<_>, Vec<_>) = samples.iter().enumerate().partition(|(i, _)| i % args.folds == f);
                (
                    train.into_iter().map(|x| x.1.clone()).collect(),
                    test.into_iter().map(|x| x.1.clone()).collect(),
                )
            })
            .collect()
    };
    for (f, (train_set, test_set)) in splits.iter().enumerate() {
        let suffix = if args.folds == 1 { String::new() } else { format!("_fold{f}") };
        let ckpt = args.out.join(format!("checkpoint{suffix}.json"));
        let (mae, report, _) = fit_and_score(&exp, seed, args.frozen, train_set, test_set, test_set, Some(&ckpt))?;
        write_history_csv(&report.history, &args.out.join(format!("history{suffix}.csv")))?;
        folds.push(FoldResult {
            fold: f,
            train_samples: train_set.len(),
            test_samples: test_set.len(),
            test_mae: mae,
            best_epoch: report.best_epoch,
        });
    }
    let mean_test_mae = folds.iter().map(|f| f.test_mae).sum::<f64>() / folds.len() as f64;
    print_json(&TrainSummary {
        frozen: args.frozen,
        seed,
        folds,
        mean_test_mae,
    })
}

fn eval_cmd(args: EvalArgs) -> anyhow::Result<()> {
    let exp = experiment(args.config.as_deref())?;
    let model = load_checkpoint(&args.checkpoint)?;
    let samples = segment_samples(&exp.data, &read_sequences_csv(&args.data)?)?;
    let mae = evaluate(&model, &samples, LossKind::Mae, exp.train.batch_size)?;
    print_json(&serde_json::json!({ "samples": samples.len(), "mae": mae }))
}

fn verify_cmd(args: VerifyArgs) -> anyhow::Result<bool> {
    let report = run_suite(args.suite.name(), env_seed()?.unwrap_or(args.seed))?;
    print_json(&report)?;
    Ok(report.pass)
}

fn bench_cmd(args: BenchArgs) -> anyhow::Result<()> {
    let mut cfg: BenchConfig = read_json(&args.config)?;
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    let report = bench_config(&cfg)?;
    if args.json {
        print_json(&report)
    } else {
        println!("{}", BenchReport::CSV_HEADER);
        println!("{}", report.csv_row());
        Ok(())
    }
}

fn exit_code(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. }) => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Generate { kind } => generate(kind).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Verify(a) => verify_cmd(a),
        Command::Bench(a) => bench_cmd(a).map(|_| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
