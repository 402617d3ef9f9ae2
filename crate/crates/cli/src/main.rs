//! Command-line driver: dataset generation, SVT experiments, network
//! training/evaluation, and the Bell/POVM studies. Every command writes a
//! JSON run manifest next to its primary artifact and honors `--seed` so
//! identical invocations reproduce identical outputs (manifests track
//! wall-clock duration, which is exempt).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use qst_core::lqst::{forward, init_params, NetworkParams};
use qst_core::quantum::{
    pauli4_povm, povm_probabilities, sample_povm, DensityMatrix, EnsembleKind,
};
use qst_core::svt::{psd_probability, tune_sweep, SweepCell};
use qst_core::train::{
    evaluate, gen_dataset, load_checkpoint, load_dataset, save_checkpoint, save_dataset,
    summarize_estimates, train_loop, CheckpointMeta, DatasetConfig, EvalMetrics, Split,
    TrainOptions, TrainReport,
};

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "qst",
    version,
    about = "Low-rank quantum state tomography: SVT solver and learned unrolled estimator"
)]
struct Cli {
    /// Worker threads for parallel sections (falls back to LQST_THREADS,
    /// then to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of random states and measurement records.
    GenData(GenDataArgs),
    /// SVT tuning sweep or PSD-probability experiment.
    Svt(SvtArgs),
    /// Train the unrolled network on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split or on Bell-state data.
    Eval(EvalArgs),
    /// Merge an SVT sweep with network evaluations into one table.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Number of qubits.
    #[arg(long)]
    qubits: usize,
    /// Rank of the random target states.
    #[arg(long)]
    rank: usize,
    /// Measurement rows: a seeded random Pauli selection including the
    /// identity (expectation data), or a POVM outcome subset with --povm.
    #[arg(long)]
    meas: Option<usize>,
    /// Record outcome frequencies of the product POVM instead of Pauli
    /// expectations.
    #[arg(long, value_enum)]
    povm: Option<PovmChoice>,
    /// Shots per sample (POVM mode only).
    #[arg(long)]
    n_avg: Option<u64>,
    /// Split sizes as train,validation,test.
    #[arg(long, value_parser = parse_sizes)]
    sizes: Sizes,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset output path.
    #[arg(long)]
    out: PathBuf,
    /// Manifest path (default: <out>.manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PovmChoice {
    /// Tensor products of the single-qubit 4-outcome POVM.
    Pauli4,
}

#[derive(Clone, Debug)]
struct Sizes(usize, usize, usize);

fn parse_sizes(s: &str) -> Result<Sizes, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err("expected train,validation,test".into());
    }
    let mut v = [0usize; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|e| format!("bad size {part:?}: {e}"))?;
    }
    Ok(Sizes(v[0], v[1], v[2]))
}

#[derive(clap::Args)]
struct SvtArgs {
    /// Run the PSD-probability experiment instead of the tuning sweep.
    #[arg(long)]
    psd_prob: bool,
    /// Ranks of the sweep grid.
    #[arg(long, value_delimiter = ',')]
    ranks: Vec<usize>,
    /// Shrinkage thresholds of the sweep grid.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    taus: Vec<f64>,
    /// Step sizes of the sweep grid.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    deltas: Vec<f64>,
    /// Shrinkage threshold (--psd-prob mode).
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Step size (--psd-prob mode).
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    /// Trials per grid cell (default: 20 for the sweep, 1000 for
    /// --psd-prob; --quick shrinks both).
    #[arg(long)]
    trials: Option<usize>,
    /// Master seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path (required for the sweep).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Smoke-test trial counts.
    #[arg(long)]
    quick: bool,
    /// Manifest path (default: <out>.manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug)]
struct Patience(Option<u64>);

fn parse_patience(s: &str) -> Result<Patience, String> {
    match s {
        "none" | "inf" | "infinite" => Ok(Patience(None)),
        other => other
            .parse::<u64>()
            .map(|v| Patience(Some(v)))
            .map_err(|e| format!("expected a count or \"none\": {e}")),
    }
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset file from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Unrolled depth T.
    #[arg(long)]
    layers: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 1000)]
    batch: usize,
    /// ADAM learning rate.
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Output-layer diagonal shift (degeneracy breaker).
    #[arg(long, default_value_t = 0.0)]
    mu: f64,
    /// Output-layer eigenvalue regularizer.
    #[arg(long, default_value_t = 1e-8)]
    epsilon: f64,
    /// Epoch budget.
    #[arg(long, default_value_t = 100)]
    max_epochs: usize,
    /// Validation evaluations without improvement before stopping
    /// ("none" disables early stopping).
    #[arg(long, default_value = "50", value_parser = parse_patience)]
    patience: Patience,
    /// Validate every k-th mini-batch (epoch ends always validate).
    #[arg(long, default_value_t = 1)]
    val_stride: usize,
    /// Training seed (shuffles).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Report JSON path (default: <out>.report.json).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Loss-curve CSV path (default: <out>.curve.csv).
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Manifest path (default: <out>.manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    Train,
    Validation,
    Test,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Evaluate repeated Bell-state estimations from sampled POVM data.
    #[arg(long)]
    bell: bool,
    /// Checkpoint path(s); an m-sweep takes one per m value.
    #[arg(long, value_delimiter = ',', required = true)]
    ckpt: Vec<PathBuf>,
    /// Dataset file (dataset mode).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dataset split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitChoice::Test)]
    split: SplitChoice,
    /// Expected measurement count (cross-checked against the checkpoint).
    #[arg(long)]
    m: Option<usize>,
    /// Shots per estimation (Bell mode).
    #[arg(long)]
    n_avg: Option<u64>,
    /// Estimations to average over (default 100; --quick shrinks it).
    #[arg(long)]
    repeats: Option<usize>,
    /// Sweep spec: "n-avg=100,200,1000" or "m=10,16".
    #[arg(long)]
    sweep: Option<String>,
    /// Sampling seed (Bell mode).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path: JSON (single evaluation) or CSV (sweep).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Smoke-test repeat counts.
    #[arg(long)]
    quick: bool,
    /// Manifest path (default: <out>.manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// SVT sweep CSV (from `qst svt`).
    #[arg(long)]
    svt: PathBuf,
    /// Evaluation JSON files (from `qst eval`), one per network depth.
    #[arg(long, value_delimiter = ',', required = true)]
    evals: Vec<PathBuf>,
    /// Select the SVT row by rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Select the SVT row by tau.
    #[arg(long, allow_negative_numbers = true)]
    tau: Option<f64>,
    /// Select the SVT row by delta.
    #[arg(long, allow_negative_numbers = true)]
    delta: Option<f64>,
    /// Merged CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Manifest path (default: <out>.manifest.json).
    #[arg(long)]
    manifest: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = setup_threads(cli.threads) {
        usage_error(&format!("--threads: {e}"));
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Reports a flag-level problem in clap's own format and exits nonzero.
fn usage_error(message: &str) -> ! {
    Cli::command()
        .error(ErrorKind::InvalidValue, message)
        .exit()
}

fn setup_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("LQST_THREADS") {
            Ok(v) => Some(v.parse::<usize>().context("LQST_THREADS")?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("thread count must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("rayon thread pool")?;
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Svt(args) => cmd_svt(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    }
}

// ---------------------------------------------------------------------------
// Run manifests
// ---------------------------------------------------------------------------

/// Provenance record written next to every primary artifact.
#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: String,
    seed: u64,
    config: serde_json::Value,
    artifacts: BTreeMap<String, String>,
    duration_seconds: f64,
}

fn default_manifest_path(primary_out: &Path) -> PathBuf {
    let mut name = primary_out.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn write_manifest(
    path: &Path,
    command: &str,
    seed: u64,
    config: serde_json::Value,
    artifacts: &[(&str, &Path)],
    started: Instant,
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config,
        artifacts: artifacts
            .iter()
            .map(|(k, p)| (k.to_string(), p.display().to_string()))
            .collect(),
        duration_seconds: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    println!("manifest: {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let started = Instant::now();
    let (kind, meas_count) = match (args.povm, args.meas) {
        (Some(PovmChoice::Pauli4), m) => {
            if args.n_avg.is_none() {
                usage_error("--povm requires --n-avg");
            }
            let full = 4usize.pow(args.qubits as u32);
            (EnsembleKind::Povm, m.unwrap_or(full))
        }
        (None, Some(m)) => {
            if args.n_avg.is_some() {
                usage_error("--n-avg applies only to --povm datasets");
            }
            (EnsembleKind::PauliExpectation, m)
        }
        (None, None) => usage_error("either --meas or --povm is required"),
    };
    let Sizes(n_train, n_val, n_test) = args.sizes;
    let config = DatasetConfig {
        n_qubits: args.qubits,
        rank: args.rank,
        kind,
        meas_count,
        codes: None,
        sizes: (n_train, n_val, n_test),
        n_avg: args.n_avg,
        seed: args.seed,
    };
    let dataset = gen_dataset(&config)?;
    save_dataset(&dataset, &args.out)?;
    println!(
        "dataset: {} ({} samples, d={}, m={})",
        args.out.display(),
        dataset.samples().len(),
        dataset.dim(),
        dataset.meas_count()
    );

    let manifest_path = args
        .manifest
        .unwrap_or_else(|| default_manifest_path(&args.out));
    write_manifest(
        &manifest_path,
        "gen-data",
        args.seed,
        serde_json::json!({
            "qubits": args.qubits,
            "rank": args.rank,
            "kind": kind,
            "meas": meas_count,
            "n_avg": args.n_avg,
            "sizes": [n_train, n_val, n_test],
        }),
        &[("dataset", args.out.as_path())],
        started,
    )
}

// ---------------------------------------------------------------------------
// svt
// ---------------------------------------------------------------------------

fn cmd_svt(args: SvtArgs) -> Result<()> {
    if args.psd_prob {
        svt_psd_prob(args)
    } else {
        svt_sweep(args)
    }
}

fn svt_psd_prob(args: SvtArgs) -> Result<()> {
    let started = Instant::now();
    let (tau, delta) = match (args.tau, args.delta) {
        (Some(t), Some(d)) => (t, d),
        _ => usage_error("--psd-prob requires --tau and --delta"),
    };
    if !(tau > 0.0) || !(delta > 0.0) {
        usage_error("--tau and --delta must be positive");
    }
    let trials = args.trials.unwrap_or(if args.quick { 50 } else { 1000 });
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
    let p = psd_probability(tau, delta, trials, &mut rng)?;
    println!("psd_probability: {p}");

    if let Some(out) = &args.out {
        let mut w = csv::Writer::from_path(out)?;
        w.write_record(["tau", "delta", "trials", "psd_probability"])?;
        w.write_record([
            tau.to_string(),
            delta.to_string(),
            trials.to_string(),
            p.to_string(),
        ])?;
        w.flush()?;
        let manifest_path = args
            .manifest
            .clone()
            .unwrap_or_else(|| default_manifest_path(out));
        write_manifest(
            &manifest_path,
            "svt",
            args.seed,
            serde_json::json!({
                "mode": "psd-prob",
                "tau": tau,
                "delta": delta,
                "trials": trials,
            }),
            &[("report", out.as_path())],
            started,
        )?;
    }
    Ok(())
}

fn svt_sweep(args: SvtArgs) -> Result<()> {
    let started = Instant::now();
    if args.ranks.is_empty() || args.taus.is_empty() || args.deltas.is_empty() {
        usage_error("the sweep requires --ranks, --taus and --deltas");
    }
    if args
        .taus
        .iter()
        .chain(&args.deltas)
        .any(|&v| !(v > 0.0) || !v.is_finite())
    {
        usage_error("--taus and --deltas must be positive");
    }
    let Some(out) = &args.out else {
        usage_error("the sweep requires --out");
    };
    let trials = args.trials.unwrap_or(if args.quick { 5 } else { 20 });
    let mut rng = ChaCha12Rng::seed_from_u64(args.seed);
    let cells = tune_sweep(&args.ranks, &args.taus, &args.deltas, trials, &mut rng)?;
    write_sweep_csv(out, &cells)?;
    println!("svt sweep: {} ({} cells)", out.display(), cells.len());

    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(out));
    write_manifest(
        &manifest_path,
        "svt",
        args.seed,
        serde_json::json!({
            "mode": "sweep",
            "ranks": args.ranks,
            "taus": args.taus,
            "deltas": args.deltas,
            "trials": trials,
        }),
        &[("report", out.as_path())],
        started,
    )
}

/// Writes sweep cells to CSV; cells where any trial diverged carry -1
/// in every statistic column.
fn write_sweep_csv(path: &Path, cells: &[SweepCell]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "rank",
        "tau",
        "delta",
        "mean_iterations",
        "mean_fidelity",
        "mean_trace_distance",
        "psd_probability",
    ])?;
    for cell in cells {
        let stat = |v: f64| {
            if cell.diverged {
                "-1".to_string()
            } else {
                v.to_string()
            }
        };
        w.write_record([
            cell.rank.to_string(),
            cell.tau.to_string(),
            cell.delta.to_string(),
            stat(cell.mean_iterations),
            stat(cell.mean_fidelity),
            stat(cell.mean_trace_distance),
            stat(cell.psd_fraction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Report JSON written next to a checkpoint.
#[derive(Serialize)]
struct TrainReportDoc {
    manifest: String,
    options: serde_json::Value,
    report: TrainReport,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let started = Instant::now();
    if args.layers == 0 {
        usage_error("--layers must be at least 1");
    }
    let dataset = load_dataset(&args.data)
        .with_context(|| format!("loading dataset {}", args.data.display()))?;
    let params = init_params(dataset.ensemble(), args.layers, args.mu, args.epsilon)?;
    let options = TrainOptions {
        batch_size: args.batch,
        lr: args.lr,
        max_epochs: args.max_epochs,
        patience: args.patience.0,
        seed: args.seed,
        val_stride: args.val_stride,
    };
    println!(
        "training: d={}, m={}, T={}, {} train / {} val samples",
        dataset.dim(),
        dataset.meas_count(),
        args.layers,
        dataset.train().len(),
        dataset.validation().len()
    );
    let (trained, mut report) = train_loop(&params, &dataset, &options)?;
    println!(
        "stopped after {} epochs ({:?}), best val loss {:?} at epoch {:?}",
        report.curve.len(),
        report.stopping,
        report.best_val_loss,
        report.best_epoch
    );
    if !dataset.test().is_empty() {
        let metrics = evaluate(&trained, &dataset, Split::Test)?;
        print_metrics(&metrics);
        report.final_metrics = Some(metrics);
    }

    let meta = CheckpointMeta {
        kind: dataset.kind(),
        n_qubits: dataset.n_qubits(),
        codes: dataset.ensemble().codes().to_vec(),
    };
    save_checkpoint(&trained, &meta, &args.out)?;
    println!("checkpoint: {}", args.out.display());

    let curve_path = args
        .curve
        .clone()
        .unwrap_or_else(|| derived_path(&args.out, ".curve.csv"));
    write_curve_csv(&curve_path, &report)?;
    println!("curve: {}", curve_path.display());

    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.out));
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| derived_path(&args.out, ".report.json"));
    let options_json = serde_json::json!({
        "data": args.data.display().to_string(),
        "layers": args.layers,
        "batch": args.batch,
        "lr": args.lr,
        "mu": args.mu,
        "epsilon": args.epsilon,
        "max_epochs": args.max_epochs,
        "patience": args.patience.0,
        "val_stride": args.val_stride,
    });
    let doc = TrainReportDoc {
        manifest: manifest_path.display().to_string(),
        options: options_json.clone(),
        report,
    };
    std::fs::write(&report_path, serde_json::to_string_pretty(&doc)?)?;
    println!("report: {}", report_path.display());

    write_manifest(
        &manifest_path,
        "train",
        args.seed,
        options_json,
        &[
            ("dataset", args.data.as_path()),
            ("checkpoint", args.out.as_path()),
            ("report", report_path.as_path()),
            ("curve", curve_path.as_path()),
        ],
        started,
    )
}

fn derived_path(primary: &Path, suffix: &str) -> PathBuf {
    let stem = primary.file_stem().unwrap_or(primary.as_os_str());
    let mut name = stem.to_owned();
    name.push(suffix);
    primary.with_file_name(name)
}

fn write_curve_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for row in &report.curve {
        w.write_record([
            row.epoch.to_string(),
            row.train_loss.to_string(),
            row.val_loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn print_metrics(metrics: &EvalMetrics) {
    println!(
        "fidelity: {:.6} +- {:.6}",
        metrics.mean_fidelity, metrics.std_fidelity
    );
    println!(
        "trace_distance: {:.6} +- {:.6}",
        metrics.mean_trace_distance, metrics.std_trace_distance
    );
    println!("mean_rank: {:.4}", metrics.mean_rank);
    if let Some(cf) = metrics.mean_classic_fidelity {
        println!("classic_fidelity: {cf:.6}");
    }
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Evaluation document written by `qst eval` and consumed by `qst report`.
#[derive(Serialize, Deserialize)]
struct EvalDoc {
    manifest: String,
    mode: String,
    depth: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    split: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_avg: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    repeats: Option<usize>,
    metrics: EvalMetrics,
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if args.bell {
        if args.data.is_some() {
            usage_error("--data does not apply to --bell evaluations");
        }
        match parse_sweep(args.sweep.as_deref())? {
            Some(spec) => bell_sweep(args, spec),
            None => bell_single(args),
        }
    } else {
        if args.sweep.is_some() || args.n_avg.is_some() || args.repeats.is_some() {
            usage_error("--sweep/--n-avg/--repeats require --bell");
        }
        dataset_eval(args)
    }
}

fn dataset_eval(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let Some(data) = &args.data else {
        usage_error("dataset evaluation requires --data");
    };
    let [ckpt] = args.ckpt.as_slice() else {
        usage_error("dataset evaluation takes exactly one --ckpt");
    };
    let dataset = load_dataset(data)?;
    let (params, _) = load_checkpoint(ckpt, Some(dataset.dim()))?;
    check_meas_flag(args.m, &params)?;
    let split = match args.split {
        SplitChoice::Train => Split::Train,
        SplitChoice::Validation => Split::Validation,
        SplitChoice::Test => Split::Test,
    };
    let metrics = evaluate(&params, &dataset, split)?;
    print_metrics(&metrics);

    if let Some(out) = &args.out {
        let manifest_path = args
            .manifest
            .clone()
            .unwrap_or_else(|| default_manifest_path(out));
        let doc = EvalDoc {
            manifest: manifest_path.display().to_string(),
            mode: "dataset".into(),
            depth: params.depth(),
            split: Some(format!("{:?}", args.split).to_lowercase()),
            m: Some(params.meas_count),
            n_avg: None,
            repeats: None,
            metrics,
        };
        std::fs::write(out, serde_json::to_string_pretty(&doc)?)?;
        println!("metrics: {}", out.display());
        write_manifest(
            &manifest_path,
            "eval",
            args.seed,
            serde_json::json!({
                "mode": "dataset",
                "ckpt": ckpt.display().to_string(),
                "data": data.display().to_string(),
                "split": doc.split,
            }),
            &[("report", out.as_path())],
            started,
        )?;
    }
    Ok(())
}

fn check_meas_flag(flag: Option<usize>, params: &NetworkParams) -> Result<()> {
    if let Some(m) = flag {
        if m != params.meas_count {
            bail!(
                "--m {m} does not match the checkpoint's measurement count {}",
                params.meas_count
            );
        }
    }
    Ok(())
}

/// Estimates the Bell state `repeats` times from freshly sampled POVM
/// frequencies and summarizes against the exact state and distribution.
fn bell_estimations(
    params: &NetworkParams,
    codes: &[usize],
    n_avg: u64,
    repeats: usize,
    seed: u64,
    stream_base: u64,
) -> Result<EvalMetrics> {
    let bell = DensityMatrix::bell();
    let full = pauli4_povm(2)?;
    let p_exact = povm_probabilities(&bell, &full)?;
    let estimates: Vec<DensityMatrix> = (0..repeats)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            rng.set_stream(stream_base + r as u64);
            let freqs = sample_povm(&p_exact, n_avg, &mut rng)
                .map_err(|e| anyhow!("sampling estimation {r}: {e}"))?;
            let b: Vec<f64> = codes.iter().map(|&c| freqs[c]).collect();
            let (estimate, _) = forward(params, &b)?;
            Ok(estimate)
        })
        .collect::<Result<_>>()?;
    let pairs: Vec<(&DensityMatrix, &DensityMatrix)> =
        estimates.iter().map(|e| (&bell, e)).collect();
    Ok(summarize_estimates(&pairs, Some(&full))?)
}

fn load_bell_checkpoint(path: &Path) -> Result<(NetworkParams, CheckpointMeta)> {
    let (params, meta) = load_checkpoint(path, Some(4))?;
    if meta.kind != EnsembleKind::Povm {
        bail!("checkpoint {} was not trained on POVM data", path.display());
    }
    Ok((params, meta))
}

fn bell_single(args: EvalArgs) -> Result<()> {
    let started = Instant::now();
    let [ckpt] = args.ckpt.as_slice() else {
        usage_error("--bell takes exactly one --ckpt (lists are for m sweeps)");
    };
    let Some(n_avg) = args.n_avg else {
        usage_error("--bell requires --n-avg");
    };
    let repeats = args.repeats.unwrap_or(if args.quick { 10 } else { 100 });
    let (params, meta) = load_bell_checkpoint(ckpt)?;
    check_meas_flag(args.m, &params)?;
    let metrics = bell_estimations(&params, &meta.codes, n_avg, repeats, args.seed, 0)?;
    print_metrics(&metrics);

    if let Some(out) = &args.out {
        let manifest_path = args
            .manifest
            .clone()
            .unwrap_or_else(|| default_manifest_path(out));
        let doc = EvalDoc {
            manifest: manifest_path.display().to_string(),
            mode: "bell".into(),
            depth: params.depth(),
            split: None,
            m: Some(params.meas_count),
            n_avg: Some(n_avg),
            repeats: Some(repeats),
            metrics,
        };
        std::fs::write(out, serde_json::to_string_pretty(&doc)?)?;
        println!("metrics: {}", out.display());
        write_manifest(
            &manifest_path,
            "eval",
            args.seed,
            serde_json::json!({
                "mode": "bell",
                "ckpt": ckpt.display().to_string(),
                "m": params.meas_count,
                "n_avg": n_avg,
                "repeats": repeats,
            }),
            &[("report", out.as_path())],
            started,
        )?;
    }
    Ok(())
}

enum SweepSpec {
    NAvg(Vec<u64>),
    Meas(Vec<usize>),
}

fn parse_sweep(spec: Option<&str>) -> Result<Option<SweepSpec>> {
    let Some(spec) = spec else { return Ok(None) };
    let Some((key, values)) = spec.split_once('=') else {
        usage_error("--sweep expects key=v1,v2,... with key `n-avg` or `m`");
    };
    let parse_list = |values: &str| -> Result<Vec<u64>> {
        values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<u64>()
                    .map_err(|e| anyhow!("bad sweep value {v:?}: {e}"))
            })
            .collect()
    };
    match key.trim() {
        "n-avg" | "n_avg" => Ok(Some(SweepSpec::NAvg(parse_list(values)?))),
        "m" => Ok(Some(SweepSpec::Meas(
            parse_list(values)?
                .into_iter()
                .map(|v| v as usize)
                .collect(),
        ))),
        other => usage_error(&format!("unknown sweep key {other:?}")),
    }
}

fn bell_sweep(args: EvalArgs, spec: SweepSpec) -> Result<()> {
    let started = Instant::now();
    let repeats = args.repeats.unwrap_or(if args.quick { 10 } else { 100 });
    let Some(out) = &args.out else {
        usage_error("--sweep requires --out");
    };

    let mut rows: Vec<(String, u64, EvalMetrics)> = Vec::new();
    match &spec {
        SweepSpec::NAvg(values) => {
            if values.is_empty() {
                usage_error("--sweep n-avg= needs at least one value");
            }
            let [ckpt] = args.ckpt.as_slice() else {
                usage_error("an n-avg sweep takes exactly one --ckpt");
            };
            let (params, meta) = load_bell_checkpoint(ckpt)?;
            check_meas_flag(args.m, &params)?;
            for (i, &n_avg) in values.iter().enumerate() {
                let stream = (i as u64) * repeats as u64;
                let metrics =
                    bell_estimations(&params, &meta.codes, n_avg, repeats, args.seed, stream)?;
                println!(
                    "n_avg {n_avg}: fidelity {:.4}, classic fidelity {:.4}",
                    metrics.mean_fidelity,
                    metrics.mean_classic_fidelity.unwrap_or(f64::NAN)
                );
                rows.push((n_avg.to_string(), n_avg, metrics));
            }
        }
        SweepSpec::Meas(values) => {
            if values.is_empty() {
                usage_error("--sweep m= needs at least one value");
            }
            if args.ckpt.len() != values.len() {
                usage_error("an m sweep needs one --ckpt per m value");
            }
            let Some(n_avg) = args.n_avg else {
                usage_error("an m sweep requires --n-avg");
            };
            for (i, (&m, ckpt)) in values.iter().zip(&args.ckpt).enumerate() {
                let (params, meta) = load_bell_checkpoint(ckpt)?;
                if params.meas_count != m {
                    bail!(
                        "checkpoint {} has m={}, sweep expects {m}",
                        ckpt.display(),
                        params.meas_count
                    );
                }
                let stream = (i as u64) * repeats as u64;
                let metrics =
                    bell_estimations(&params, &meta.codes, n_avg, repeats, args.seed, stream)?;
                println!(
                    "m {m}: fidelity {:.4}, classic fidelity {:.4}",
                    metrics.mean_fidelity,
                    metrics.mean_classic_fidelity.unwrap_or(f64::NAN)
                );
                rows.push((m.to_string(), n_avg, metrics));
            }
        }
    }

    let key = match &spec {
        SweepSpec::NAvg(_) => "n_avg",
        SweepSpec::Meas(_) => "m",
    };
    let mut w = csv::Writer::from_path(out)?;
    w.write_record([
        key,
        "shots",
        "repeats",
        "mean_fidelity",
        "std_fidelity",
        "mean_trace_distance",
        "std_trace_distance",
        "mean_classic_fidelity",
    ])?;
    for (value, shots, m) in &rows {
        w.write_record([
            value.clone(),
            shots.to_string(),
            repeats.to_string(),
            m.mean_fidelity.to_string(),
            m.std_fidelity.to_string(),
            m.mean_trace_distance.to_string(),
            m.std_trace_distance.to_string(),
            m.mean_classic_fidelity.unwrap_or(f64::NAN).to_string(),
        ])?;
    }
    w.flush()?;
    println!("sweep: {}", out.display());

    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(out));
    write_manifest(
        &manifest_path,
        "eval",
        args.seed,
        serde_json::json!({
            "mode": "bell-sweep",
            "key": key,
            "ckpt": args.ckpt.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "repeats": repeats,
            "n_avg": args.n_avg,
        }),
        &[("report", out.as_path())],
        started,
    )
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn cmd_report(args: ReportArgs) -> Result<()> {
    let started = Instant::now();
    if args.evals.is_empty() {
        usage_error("--evals needs at least one evaluation JSON");
    }
    let svt_row = read_svt_row(&args.svt, args.rank, args.tau, args.delta)?;
    let mut evals: Vec<EvalDoc> = Vec::new();
    for path in &args.evals {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let doc: EvalDoc =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        evals.push(doc);
    }
    evals.sort_by_key(|e| e.depth);
    for pair in evals.windows(2) {
        if pair[0].depth == pair[1].depth {
            bail!("two evaluation inputs share depth {}", pair[0].depth);
        }
    }

    let mut header = vec!["metric".to_string(), "svt".to_string()];
    header.extend(evals.iter().map(|e| format!("lqst_t{}", e.depth)));

    let stat = |v: f64, diverged: bool| {
        if diverged {
            "-1".to_string()
        } else {
            v.to_string()
        }
    };
    let diverged = svt_row.diverged;
    let rows: Vec<Vec<String>> = vec![
        std::iter::once("iterations".to_string())
            .chain(std::iter::once(stat(svt_row.mean_iterations, diverged)))
            .chain(evals.iter().map(|e| e.depth.to_string()))
            .collect(),
        std::iter::once("fidelity".to_string())
            .chain(std::iter::once(stat(svt_row.mean_fidelity, diverged)))
            .chain(evals.iter().map(|e| e.metrics.mean_fidelity.to_string()))
            .collect(),
        std::iter::once("fidelity_std".to_string())
            .chain(std::iter::once(String::new()))
            .chain(evals.iter().map(|e| e.metrics.std_fidelity.to_string()))
            .collect(),
        std::iter::once("trace_distance".to_string())
            .chain(std::iter::once(stat(svt_row.mean_trace_distance, diverged)))
            .chain(
                evals
                    .iter()
                    .map(|e| e.metrics.mean_trace_distance.to_string()),
            )
            .collect(),
        std::iter::once("trace_distance_std".to_string())
            .chain(std::iter::once(String::new()))
            .chain(
                evals
                    .iter()
                    .map(|e| e.metrics.std_trace_distance.to_string()),
            )
            .collect(),
    ];

    let mut w = csv::Writer::from_path(&args.out)?;
    w.write_record(&header)?;
    for row in &rows {
        w.write_record(row)?;
    }
    w.flush()?;
    println!("report: {}", args.out.display());

    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| default_manifest_path(&args.out));
    write_manifest(
        &manifest_path,
        "report",
        0,
        serde_json::json!({
            "svt": args.svt.display().to_string(),
            "evals": args.evals.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
            "rank": args.rank,
            "tau": args.tau,
            "delta": args.delta,
        }),
        &[("report", args.out.as_path())],
        started,
    )
}

/// One parsed row of an SVT sweep CSV.
struct SvtRow {
    mean_iterations: f64,
    mean_fidelity: f64,
    mean_trace_distance: f64,
    diverged: bool,
}

fn read_svt_row(
    path: &Path,
    rank: Option<usize>,
    tau: Option<f64>,
    delta: Option<f64>,
) -> Result<SvtRow> {
    let mut reader =
        csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{} lacks column {name}", path.display()))
    };
    let (c_rank, c_tau, c_delta) = (col("rank")?, col("tau")?, col("delta")?);
    let (c_it, c_fid, c_td) = (
        col("mean_iterations")?,
        col("mean_fidelity")?,
        col("mean_trace_distance")?,
    );
    let mut matches: Vec<SvtRow> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let field = |i: usize| -> Result<f64> {
            record
                .get(i)
                .ok_or_else(|| anyhow!("short record in {}", path.display()))?
                .parse::<f64>()
                .map_err(|e| anyhow!("bad number in {}: {e}", path.display()))
        };
        if let Some(r) = rank {
            if field(c_rank)? as usize != r {
                continue;
            }
        }
        if let Some(t) = tau {
            if field(c_tau)? != t {
                continue;
            }
        }
        if let Some(d) = delta {
            if field(c_delta)? != d {
                continue;
            }
        }
        let it = field(c_it)?;
        matches.push(SvtRow {
            mean_iterations: it,
            mean_fidelity: field(c_fid)?,
            mean_trace_distance: field(c_td)?,
            diverged: it == -1.0,
        });
    }
    match matches.len() {
        0 => bail!("no SVT row matches the --rank/--tau/--delta selection"),
        1 => Ok(matches.remove(0)),
        n => bail!("{n} SVT rows match; narrow the selection with --rank/--tau/--delta"),
    }
}
