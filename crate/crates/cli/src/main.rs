use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use mcegnn::data::{ChargedConfig, FeatureKind, OrbitalConfig, Split, TrajectoryDataset};
use mcegnn::egnn::{load_model, MCEGNNConfig, MCEGNNModel};
use mcegnn::equicheck::{check_model_all, full_suite, EquivarianceReport, SuiteOptions};
use mcegnn::experiment::{self, DatasetSpec, ExperimentConfig, SplitCounts};
use mcegnn::train::{bench_csv, bench_table, evaluate, LossKind, PreparedSplit};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PROPERTY: u8 = 3;

/// Multi-channel EGNN experiments: data generation, training, evaluation,
/// symmetry checks and benchmarks.
#[derive(Debug, Parser)]
#[command(name = "mcegnn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate systems and write a dataset container.
    GenData(GenData),
    /// Train a model and write checkpoint, report and losses.
    Train(Train),
    /// Evaluate a checkpoint on a dataset split.
    Eval(Eval),
    /// Run the symmetry, gradient and parity suite.
    Equicheck(Equicheck),
    /// Time forward passes across channel counts.
    Bench(Bench),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Task {
    Charged,
    Orbital,
}

#[derive(Debug, Args, Serialize)]
struct GenData {
    /// Physical system to simulate.
    #[arg(value_enum)]
    task: Task,
    /// Total number of simulated systems.
    #[arg(long, default_value_t = 100)]
    systems: usize,
    /// Fraction of systems assigned to validation.
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// Fraction of systems assigned to test.
    #[arg(long, default_value_t = 0.1)]
    test_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prediction horizon in recorded frames (task preset when omitted).
    #[arg(long)]
    horizon: Option<usize>,
    /// Orbital only: number of planets.
    #[arg(long, default_value_t = 3)]
    planets: usize,
    /// Orbital only: moons per planet.
    #[arg(long, default_value_t = 2)]
    moons: usize,
    /// Integration steps per system (task preset when omitted).
    #[arg(long)]
    steps: Option<usize>,
    /// Output container path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct Train {
    /// Named preset to start from.
    #[arg(long, default_value = "nbody-small", conflicts_with = "config")]
    preset: String,
    /// Experiment config JSON instead of a preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset container; simulated from the config when omitted.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Interior vector channels.
    #[arg(long)]
    channels: Option<usize>,
    /// Seed for initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Global gradient-norm clipping threshold.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// Run directory (default: <output_dir>/<name> from the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args, Serialize)]
struct Eval {
    /// Model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset container.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    /// Metric JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args, Serialize)]
struct Equicheck {
    /// Model config JSON; the default architecture when omitted.
    #[arg(long, conflicts_with = "checkpoint")]
    config: Option<PathBuf>,
    /// Check this trained model instead of sweeping fresh configs.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct Bench {
    /// Channel counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,10,25")]
    channels: Vec<usize>,
    /// Graphs per batch.
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// Nodes per graph.
    #[arg(long, default_value_t = 5)]
    nodes: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; printed to stdout as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes.
enum Outcome {
    Ok,
    PropertyFailure,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::PropertyFailure) => ExitCode::from(EXIT_PROPERTY),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Equicheck(a) => equicheck(a),
        Command::Bench(a) => bench(a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    experiment::write_text(path, &text).with_context(|| format!("writing {}", path.display()))
}

/// `<dir>/<stem>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn split_counts(total: usize, val_frac: f64, test_frac: f64) -> Result<SplitCounts> {
    if !(0.0..1.0).contains(&val_frac) || !(0.0..1.0).contains(&test_frac) || val_frac + test_frac >= 1.0 {
        bail!("val and test fractions must be in [0, 1) and leave room for training systems");
    }
    let val = (total as f64 * val_frac).round() as usize;
    let test = (total as f64 * test_frac).round() as usize;
    if val + test >= total {
        bail!("{total} systems leave none for training");
    }
    Ok(SplitCounts {
        train: total - val - test,
        val,
        test,
    })
}

fn gen_data(a: GenData) -> Result<Outcome> {
    let systems = split_counts(a.systems, a.val_frac, a.test_frac)?;
    let spec = match a.task {
        Task::Charged => {
            let DatasetSpec::Charged { sim, horizon, starts, .. } = experiment::nbody_small(1, 0).dataset else {
                unreachable!("nbody preset is charged")
            };
            DatasetSpec::Charged {
                sim: ChargedConfig {
                    n_steps: a.steps.unwrap_or(sim.n_steps),
                    ..sim
                },
                systems,
                starts,
                horizon: a.horizon.unwrap_or(horizon),
                seed: a.seed,
            }
        }
        Task::Orbital => {
            let DatasetSpec::Orbital { sim, horizon, starts, .. } = experiment::orbital_small(1, 0).dataset else {
                unreachable!("orbital preset is orbital")
            };
            DatasetSpec::Orbital {
                sim: OrbitalConfig {
                    n_planets: a.planets,
                    moons_per_planet: a.moons,
                    n_steps: a.steps.unwrap_or(sim.n_steps),
                    ..sim
                },
                systems,
                starts,
                horizon: a.horizon.unwrap_or(horizon),
                seed: a.seed,
            }
        }
    };
    let ds = spec.generate().context("generating dataset")?;
    ensure_parent(&a.out)?;
    ds.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let summary = json!({
        "task": a.task,
        "samples": ds.samples.len(),
        "train": ds.count(Split::Train),
        "val": ds.count(Split::Val),
        "test": ds.count(Split::Test),
        "bodies": ds.n_bodies,
        "horizon": ds.horizon,
        "features": ds.features,
    });
    write_json(&sibling(&a.out, "summary.json"), &summary)?;
    write_json(&sibling(&a.out, "config.json"), &json!({ "args": a, "dataset": spec }))?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(Outcome::Ok)
}

fn resolve_train_config(a: &Train) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => experiment::preset(&a.preset, 1, 0)?,
    };
    if let Some(m) = a.channels {
        cfg.model.channels = m;
    }
    if let Some(s) = a.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(h) = a.hidden {
        cfg.model.hidden = h;
        cfg.model.message = h;
    }
    if let Some(l) = a.layers {
        cfg.model.n_layers = l;
    }
    if a.clip_norm.is_some() {
        cfg.train.clip_norm = a.clip_norm;
    }
    if a.config.is_none() {
        cfg.name = format!("{}-m{}-s{}", a.preset, cfg.model.channels, cfg.train.seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: Train) -> Result<Outcome> {
    let cfg = resolve_train_config(&a)?;
    let dataset = match &a.dataset {
        Some(path) => TrajectoryDataset::load(path).with_context(|| format!("loading dataset {}", path.display()))?,
        None => cfg.dataset.generate().context("generating dataset")?,
    };
    let dir = a.out.clone().unwrap_or_else(|| cfg.run_dir());
    let quiet = a.quiet;
    let (model, report) = experiment::train_on(&cfg, &dataset, |e| {
        if !quiet {
            eprintln!(
                "epoch {:4}  train {:.6e}  val {:.6e}  {:.2}s",
                e.epoch, e.train_loss, e.val_loss, e.seconds
            );
        }
    })?;
    experiment::write_run(&dir, &cfg, &model, &report)?;
    let summary = json!({
        "run_dir": dir,
        "params": report.param_count,
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "test_metric": report.test_metric,
        "epochs_run": report.epochs.len(),
    });
    println!("{}", serde_json::to_string(&summary)?);
    Ok(Outcome::Ok)
}

fn loss_for(features: FeatureKind) -> LossKind {
    match features {
        FeatureKind::Charge => LossKind::Mse,
        FeatureKind::LogMass => LossKind::NormalizedMse,
    }
}

fn eval(a: Eval) -> Result<Outcome> {
    let model = load_model(&a.checkpoint).with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    let dataset =
        TrajectoryDataset::load(&a.dataset).with_context(|| format!("loading dataset {}", a.dataset.display()))?;
    let f = dataset.features;
    if model.config.node_in != f.node_width() || model.config.edge_in != f.edge_width() {
        bail!(
            "checkpoint expects {} node / {} edge inputs but the dataset provides {} / {}",
            model.config.node_in,
            model.config.edge_in,
            f.node_width(),
            f.edge_width()
        );
    }
    let split = Split::from(a.split);
    let prepared = PreparedSplit::new(&dataset, split)?;
    let loss = loss_for(f);
    let value = evaluate(&model, &prepared, loss, a.batch_size)?;
    let out = json!({
        "split": split.name(),
        "metric": match loss { LossKind::Mse => "mse", LossKind::NormalizedMse => "normalized_mse" },
        "value": value,
        "samples": prepared.len(),
    });
    println!("{}", serde_json::to_string(&out)?);
    if let Some(path) = &a.out {
        ensure_parent(path)?;
        write_json(path, &out)?;
        write_json(&sibling(path, "config.json"), &a)?;
    }
    Ok(Outcome::Ok)
}

fn equicheck(a: Equicheck) -> Result<Outcome> {
    let report = match &a.checkpoint {
        Some(path) => {
            let model = load_model(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            EquivarianceReport {
                records: check_model_all(&model, a.trials, a.tol, a.seed)?,
                mutations: Vec::new(),
            }
        }
        None => {
            let base: MCEGNNConfig = match &a.config {
                Some(path) => {
                    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
                }
                None => MCEGNNConfig {
                    n_layers: 4,
                    hidden: 32,
                    message: 32,
                    ..Default::default()
                },
            };
            MCEGNNModel::new(base.clone())?;
            let opts = SuiteOptions {
                trials: a.trials,
                tolerance: a.tol,
                seed: a.seed,
                ..Default::default()
            };
            full_suite(&base, &opts)?
        }
    };
    let failures = report.failures();
    for f in &failures {
        eprintln!("FAIL {}: deviation {:.3e} (tolerance {:.1e})", f.property, f.max_deviation, f.tolerance);
    }
    let out = json!({ "all_pass": report.all_pass(), "report": report });
    if let Some(path) = &a.out {
        ensure_parent(path)?;
        write_json(path, &out)?;
        write_json(&sibling(path, "config.json"), &a)?;
    }
    println!(
        "{}",
        serde_json::to_string(&json!({
            "all_pass": report.all_pass(),
            "records": report.records.len(),
            "mutations": report.mutations.len(),
            "failures": failures.len(),
        }))?
    );
    Ok(if report.all_pass() {
        Outcome::Ok
    } else {
        Outcome::PropertyFailure
    })
}

fn bench(a: Bench) -> Result<Outcome> {
    if a.channels.is_empty() || a.channels.contains(&0) {
        bail!("channel counts must be positive");
    }
    let base = MCEGNNConfig {
        seed: a.seed,
        ..Default::default()
    };
    let batch = mcegnn::equicheck::random_batch(&base, a.batch, a.nodes, a.seed)?;
    let rows = bench_table(&base, &a.channels, &batch, a.repeats)?;
    let csv = bench_csv(&rows);
    print!("{csv}");
    if let Some(path) = &a.out {
        ensure_parent(path)?;
        experiment::write_text(path, &csv)?;
        write_json(&sibling(path, "config.json"), &json!({ "args": a, "model": base }))?;
    }
    Ok(Outcome::Ok)
}
