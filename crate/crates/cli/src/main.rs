//! `leapts` command-line tool.
//!
//! Every command writes its resolved configuration to stderr as one JSON
//! line prefixed with `config:` and its result to stdout (JSON, JSONL or
//! CSV). Exit codes: 0 success, 1 usage error, 2 data or configuration
//! error, 3 numeric failure.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use leapts::bounds::{bound_direct, bound_leapts_optimal, bound_leapts_optimal_dp, bound_recursive, write_bound_csv, BoundInstance, BoundRow, MAX_EXHAUSTIVE_HORIZON};
use leapts::checkpoint::{self, Checkpoint};
use leapts::data::{load_csv, make_windows, Dataset, Split, WindowBatch};
use leapts::diagnostics::{bin_by_volatility, category_stats, fixed_partition, forecast_windows, partition_overrides, score, trace_override, write_traces_jsonl, TraceMode};
use leapts::synth::{generate, ScenarioSpec};
use leapts::train::{train, TrainConfig, TrainOutcome};
use leapts::{scale_anchors, Ablation, LeapTs, ModelConfig, ScheduleTrace};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "leapts", version, about = "Adaptive-scheduling multi-horizon forecaster")]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a synthetic scenario to CSV plus a JSON sidecar.
    Gen(GenArgs),
    /// Train a model and write a checkpoint; prints the training report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split; prints a metric report.
    Eval(EvalArgs),
    /// Export schedule traces with per-category and volatility summaries.
    Trace(TraceArgs),
    /// Train the full model and its ablated variants on the same data.
    Ablate(AblateArgs),
    /// Error-bound simulator for direct, recursive and scheduled rollouts.
    Bounds(BoundsArgs),
    /// Print the category intervals for a look-back and horizon.
    Anchors(AnchorsArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long)]
    scenario: u8,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop the driver column U (scenario 2).
    #[arg(long)]
    hide_driver: bool,
    /// Number of samples.
    #[arg(long)]
    steps: Option<usize>,
    /// Skip observation noise.
    #[arg(long)]
    no_noise: bool,
}

/// Training options shared by `train` and `ablate`. Flags override the
/// JSON config file.
#[derive(Args, Debug)]
struct TrainOpts {
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "L")]
    lookback: Option<usize>,
    #[arg(long = "P")]
    horizon: Option<usize>,
    /// JSON file with optional `model` and `train` objects.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Cap on training batches per epoch.
    #[arg(long)]
    max_batches: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    opts: TrainOpts,
    #[arg(long)]
    out: PathBuf,
    /// none, no_sched or no_high_level.
    #[arg(long)]
    ablate: Option<Ablation>,
    /// Append one JSON line per epoch to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Write one JSON record per scheduling step.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// `monte_carlo:N` or `fixed:K`.
    #[arg(long = "override")]
    schedule: Option<OverrideMode>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// MASE seasonality.
    #[arg(long, default_value_t = 1)]
    seasonality: usize,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Only `fixed:K` is accepted here.
    #[arg(long = "override")]
    schedule: Option<OverrideMode>,
    #[arg(long, default_value_t = 1)]
    stride: usize,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    opts: TrainOpts,
    /// Comma-separated variants.
    #[arg(long, value_delimiter = ',', default_value = "none,no_sched,no_high_level")]
    variants: Vec<Ablation>,
    /// Write one checkpoint per variant here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BoundsArgs {
    #[arg(long)]
    lambda: f64,
    #[arg(long)]
    eps_a: f64,
    #[arg(long)]
    eps_p: f64,
    #[arg(long = "P")]
    horizon: usize,
    /// Emit a CSV grid over lambda, a, p and horizons 2..=P.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args, Debug, Serialize)]
struct AnchorsArgs {
    #[arg(long = "L")]
    lookback: usize,
    #[arg(long = "P")]
    horizon: usize,
}

#[derive(Clone, Copy, Debug, Serialize)]
enum OverrideMode {
    MonteCarlo(usize),
    Fixed(usize),
}

impl FromStr for OverrideMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, n) = s.split_once(':').ok_or_else(|| format!("expected monte_carlo:N or fixed:K, got `{s}`"))?;
        let n: usize = n.parse().map_err(|_| format!("`{n}` is not a count"))?;
        match kind {
            "monte_carlo" => Ok(OverrideMode::MonteCarlo(n)),
            "fixed" => Ok(OverrideMode::Fixed(n)),
            _ => Err(format!("unknown override `{kind}`")),
        }
    }
}

impl From<OverrideMode> for TraceMode {
    fn from(m: OverrideMode) -> Self {
        match m {
            OverrideMode::MonteCarlo(n) => TraceMode::MonteCarlo(n),
            OverrideMode::Fixed(k) => TraceMode::Fixed(k),
        }
    }
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigFile {
    model: Option<ModelConfig>,
    train: Option<TrainConfig>,
}

#[derive(Serialize)]
struct Resolved<'a> {
    command: &'a str,
    #[serde(flatten)]
    fields: serde_json::Value,
}

fn print_config(command: &str, fields: serde_json::Value) -> anyhow::Result<()> {
    let line = serde_json::to_string(&Resolved { command, fields })?;
    eprintln!("config: {line}");
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let stdout = io::stdout();
    let mut out = stdout.lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<leapts::Error>() {
            return match err {
                leapts::Error::Numeric(_) | leapts::Error::NonFinite { .. } => 3,
                _ => 2,
            };
        }
        if cause.downcast_ref::<Diverged>().is_some() {
            return 3;
        }
    }
    2
}

/// Training stopped on a non-finite loss; the best earlier state was saved.
#[derive(Debug)]
struct Diverged;

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("training diverged (non-finite loss); kept the last good checkpoint")
    }
}

impl std::error::Error for Diverged {}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Trace(a) => cmd_trace(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Anchors(a) => cmd_anchors(a),
    }
}

fn cmd_gen(a: GenArgs) -> anyhow::Result<()> {
    if !(1..=3).contains(&a.scenario) {
        bail!(leapts::Error::Config(format!("scenario must be 1, 2 or 3, got {}", a.scenario)));
    }
    let mut spec = ScenarioSpec::new(a.scenario, a.seed);
    spec.hide_driver = a.hide_driver;
    spec.noise = !a.no_noise;
    if let Some(steps) = a.steps {
        spec.steps = steps;
    }
    print_config("gen", serde_json::json!({ "spec": spec, "out": a.out }))?;
    let batch = generate(&spec)?;
    batch.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&serde_json::json!({
        "out": a.out,
        "rows": batch.values.rows(),
        "columns": batch.observed,
    }))
}

fn load_data(path: &Path) -> anyhow::Result<Dataset> {
    load_csv(path).with_context(|| format!("loading {}", path.display()))
}

/// Config file first, then flags.
fn resolve(opts: &TrainOpts, data: &Dataset) -> anyhow::Result<(ModelConfig, TrainConfig)> {
    let file: ConfigFile = match &opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text)
                .map_err(leapts::Error::from)
                .with_context(|| format!("parsing {}", path.display()))?
        }
        None => ConfigFile::default(),
    };
    let mut model = file.model.unwrap_or_default();
    let mut tc = file.train.unwrap_or_default();
    model.variates = data.variates();
    if let Some(v) = opts.lookback {
        model.lookback = v;
    }
    if let Some(v) = opts.horizon {
        model.horizon = v;
    }
    if let Some(v) = opts.clusters {
        model.clusters = v;
    }
    if let Some(v) = opts.hidden {
        model.hidden = v;
    }
    if let Some(v) = opts.seed {
        model.seed = v;
        tc.seed = v;
    }
    if let Some(v) = opts.epochs {
        tc.epochs = v;
    }
    if let Some(v) = opts.lr {
        tc.lr = v;
    }
    if let Some(v) = opts.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = opts.patience {
        tc.patience = v;
    }
    if let Some(v) = opts.stride {
        tc.stride = v;
    }
    if opts.max_batches.is_some() {
        tc.max_batches = opts.max_batches;
    }
    model.validate()?;
    tc.validate()?;
    Ok((model, tc))
}

fn fit(model_cfg: &ModelConfig, tc: &TrainConfig, data: &Dataset, log: Option<&mut dyn Write>) -> anyhow::Result<TrainOutcome> {
    let model = LeapTs::new(model_cfg.clone())?;
    Ok(train(model, data, tc, log)?)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let data = load_data(&a.opts.data)?;
    let (mut model_cfg, tc) = resolve(&a.opts, &data)?;
    if let Some(flag) = a.ablate {
        model_cfg.ablation = flag;
    }
    print_config("train", serde_json::json!({ "data": a.opts.data, "out": a.out, "model": model_cfg, "train": tc }))?;
    let mut log = match &a.log {
        Some(path) => Some(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?)),
        None => None,
    };
    let outcome = fit(&model_cfg, &tc, &data, log.as_mut().map(|w| w as &mut dyn Write))?;
    checkpoint::save(&a.out, &outcome.model, Some(&outcome.scaler)).with_context(|| format!("writing {}", a.out.display()))?;
    print_json(&outcome.report)?;
    if outcome.report.diverged {
        return Err(Diverged.into());
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Windows of `split`, scaled the way the checkpoint was trained.
fn checkpoint_windows(ck: &Checkpoint, data: &Dataset, split: Split, stride: usize) -> anyhow::Result<WindowBatch> {
    let cfg = &ck.model.config;
    if data.variates() != cfg.variates {
        bail!(leapts::Error::Config(format!(
            "checkpoint expects N={} variates, data has {}",
            cfg.variates,
            data.variates()
        )));
    }
    let mut scaled = data.clone();
    if let Some(scaler) = &ck.scaler {
        scaled.values = scaler.apply(&data.values);
    }
    let windows = make_windows(&scaled, cfg.lookback, cfg.horizon, split, stride)?;
    if windows.is_empty() {
        bail!(leapts::Error::Data(format!(
            "no {split:?} windows of length L+P={} in {} rows",
            cfg.lookback + cfg.horizon,
            data.len()
        )));
    }
    Ok(windows)
}

/// Forecasts and traces under the learned schedule or a fixed override.
fn traced_forecast(model: &LeapTs, windows: &WindowBatch, mode: Option<OverrideMode>) -> anyhow::Result<(leapts::Tensor, Vec<ScheduleTrace>)> {
    match mode {
        None => Ok(forecast_windows(model, windows, None)?),
        Some(OverrideMode::Fixed(k)) => {
            let part = partition_overrides(&model.anchors, &fixed_partition(model.config.horizon, k)?);
            let ov = vec![part; windows.len() * windows.variates];
            Ok(forecast_windows(model, windows, Some(&ov))?)
        }
        Some(OverrideMode::MonteCarlo(_)) => bail!(leapts::Error::Config(
            "trace export is not available for monte_carlo overrides; use fixed:K or no override".into()
        )),
    }
}

fn write_traces(path: &Path, traces: &[ScheduleTrace], categories: usize) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    write_traces_jsonl(&mut out, traces, categories)?;
    out.flush()?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let data = load_data(&a.data)?;
    print_config(
        "eval",
        serde_json::json!({
            "ckpt": a.ckpt, "data": a.data, "split": a.split, "override": a.schedule,
            "seed": a.seed, "seasonality": a.seasonality, "stride": a.stride, "model": ck.model.config,
        }),
    )?;
    let windows = checkpoint_windows(&ck, &data, a.split, a.stride)?;
    let model = &ck.model;
    let report = match (a.schedule, &a.trace) {
        (Some(OverrideMode::MonteCarlo(n)), None) => trace_override(model, &windows, TraceMode::MonteCarlo(n), a.seed, a.seasonality)?,
        (mode, trace) => {
            let (pred, traces) = traced_forecast(model, &windows, mode)?;
            if let Some(path) = trace {
                write_traces(path, &traces, model.anchors.categories())?;
            }
            score(&windows, &pred, a.seasonality)?
        }
    };
    print_json(&report)
}

#[derive(Serialize)]
struct BinSummary {
    bin: usize,
    windows: usize,
    volatility_range: (f64, f64),
    mean_eta_ctrl: f64,
    mean_eta_time: f64,
    category_distribution: Vec<f64>,
    mean_steps: f64,
}

fn cmd_trace(a: TraceArgs) -> anyhow::Result<()> {
    let ck = load_checkpoint(&a.ckpt)?;
    let data = load_data(&a.data)?;
    print_config(
        "trace",
        serde_json::json!({
            "ckpt": a.ckpt, "data": a.data, "out": a.out, "split": a.split,
            "override": a.schedule, "stride": a.stride, "model": ck.model.config,
        }),
    )?;
    let windows = checkpoint_windows(&ck, &data, a.split, a.stride)?;
    let model = &ck.model;
    let categories = model.anchors.categories();
    let (_, traces) = traced_forecast(model, &windows, a.schedule)?;
    write_traces(&a.out, &traces, categories)?;
    let stats = category_stats(&traces, categories)?;
    let bins: Vec<BinSummary> = if traces.len() >= leapts::diagnostics::VOLATILITY_BINS {
        bin_by_volatility(&traces, categories)?
            .into_iter()
            .map(|b| BinSummary {
                bin: b.bin,
                windows: b.members.len(),
                volatility_range: b.volatility_range,
                mean_eta_ctrl: b.mean_eta_ctrl,
                mean_eta_time: b.mean_eta_time,
                category_distribution: b.category_distribution,
                mean_steps: b.mean_steps,
            })
            .collect()
    } else {
        Vec::new()
    };
    print_json(&serde_json::json!({
        "out": a.out,
        "traces": traces.len(),
        "anchors": model.anchors,
        "categories": stats,
        "volatility_bins": bins,
    }))
}

#[derive(Serialize)]
struct VariantResult {
    variant: Ablation,
    parameters: usize,
    best_epoch: usize,
    best_val_loss: f64,
    diverged: bool,
    test: leapts::MetricReport,
}

fn cmd_ablate(a: AblateArgs) -> anyhow::Result<()> {
    let data = load_data(&a.opts.data)?;
    let (model_cfg, tc) = resolve(&a.opts, &data)?;
    if a.variants.is_empty() {
        bail!(leapts::Error::Config("no variants requested".into()));
    }
    print_config(
        "ablate",
        serde_json::json!({ "data": a.opts.data, "variants": a.variants, "out_dir": a.out_dir, "model": model_cfg, "train": tc }),
    )?;
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut results = Vec::new();
    for &variant in &a.variants {
        let cfg = ModelConfig { ablation: variant, ..model_cfg.clone() };
        let outcome = fit(&cfg, &tc, &data, None)?;
        if let Some(dir) = &a.out_dir {
            let path = dir.join(format!("{variant}.ckpt"));
            checkpoint::save(&path, &outcome.model, Some(&outcome.scaler)).with_context(|| format!("writing {}", path.display()))?;
        }
        let r = outcome.report;
        results.push(VariantResult {
            variant,
            parameters: r.parameters,
            best_epoch: r.best_epoch,
            best_val_loss: r.best_val_loss,
            diverged: r.diverged,
            test: r.test,
        });
    }
    print_json(&results)
}

#[derive(Serialize)]
struct BoundsReport {
    lambda: f64,
    eps_a: f64,
    eps_p: f64,
    #[serde(rename = "P")]
    horizon: usize,
    b_dir: f64,
    b_rec: f64,
    b_star: f64,
    best_partition: Vec<usize>,
    /// Gate value reaching B*; an endpoint of (0, 1) when not attained.
    alpha: f64,
    alpha_attained: bool,
}

const SWEEP_LAMBDA: [f64; 5] = [1.0, 1.1, 1.5, 2.0, 3.0];
const SWEEP_A: [f64; 3] = [0.5, 1.0, 2.0];
const SWEEP_P: [f64; 3] = [1.5, 2.0, 3.0];

fn cmd_bounds(a: BoundsArgs) -> anyhow::Result<()> {
    print_config("bounds", serde_json::to_value(&a)?)?;
    let inst = BoundInstance::new(a.lambda, a.eps_a, a.eps_p, a.horizon)?;
    if a.sweep {
        let mut rows = Vec::new();
        for &lambda in &SWEEP_LAMBDA {
            for &eps_a in &SWEEP_A {
                for &eps_p in &SWEEP_P {
                    for horizon in 2..=a.horizon.max(2) {
                        rows.push(BoundRow::evaluate(&BoundInstance::new(lambda, eps_a, eps_p, horizon)?)?);
                    }
                }
            }
        }
        write_bound_csv(io::stdout().lock(), &rows)?;
        return Ok(());
    }
    let opt = if inst.horizon <= MAX_EXHAUSTIVE_HORIZON {
        bound_leapts_optimal(&inst)?
    } else {
        bound_leapts_optimal_dp(&inst)?
    };
    print_json(&BoundsReport {
        lambda: inst.lambda,
        eps_a: inst.a,
        eps_p: inst.p,
        horizon: inst.horizon,
        b_dir: bound_direct(&inst),
        b_rec: bound_recursive(&inst),
        b_star: opt.value,
        best_partition: opt.partition,
        alpha: opt.alpha,
        alpha_attained: opt.attained,
    })
}

fn cmd_anchors(a: AnchorsArgs) -> anyhow::Result<()> {
    print_config("anchors", serde_json::to_value(&a)?)?;
    let anchors = scale_anchors(a.lookback, a.horizon)?;
    let intervals: Vec<String> = anchors.intervals.iter().map(|(lo, hi)| format!("[{lo},{hi}]")).collect();
    if anchors.degenerate {
        println!("degenerate: {}", intervals.join(" "));
    } else {
        println!("{}", intervals.join(" "));
    }
    Ok(())
}
