//! Command-line front end. Every subcommand reads files, calls into the
//! library and writes JSON, JSONL or CSV to `--out` or stdout.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::costmodel::LatencyBreakdown;
use crate::domain::{
    distribution_from_skewness, sample_trace, ExpertTrace, HardwareConfig, ModelConfig,
    TokenDistribution, WorkloadConfig,
};
use crate::duplication::{
    balance_by_duplication, balance_with_cap, verify_balance, BalanceReport, Placement,
};
use crate::error::{Error, Result};
use crate::estimation::{
    error_rate, mle_estimate, smoothed_estimate, update_moving_average, DistributionEstimate,
    UpdateMode,
};
use crate::pipeline::{simulate_layer, simulate_prefill, PredictorSpec, SimOptions};
use crate::predictors::OverheadCurve;
use crate::sweep::{
    self, run_sweep, savings_table, RecommendConfig, SavingsRow, SweepGrid, SweepRecord,
};

#[derive(Debug, Parser)]
#[command(
    name = "moe-gps",
    version,
    about = "MoE prefill latency simulator and strategy guide"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Input configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for anything sampled.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file; stdout when omitted.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic routing trace (JSONL).
    GenTrace(GenTraceArgs),
    /// Per-layer expert counts and skewness of a trace.
    TraceStats(TraceArgs),
    /// Estimate per-layer expert probabilities from a trace.
    Estimate(EstimateArgs),
    /// Balance one trace layer by duplicating experts.
    Duplicate(DuplicateArgs),
    /// Latency breakdown of one strategy at one design point.
    Simulate(SimulateArgs),
    /// Latency over interconnect x skewness x accuracy.
    Sweep,
    /// Pick the fastest strategy for one design point.
    Recommend(RecommendArgs),
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[arg(long)]
    pub experts: Option<usize>,
    /// Synthetic skewness: one hot expert, uniform tail.
    #[arg(long, conflicts_with = "distribution")]
    pub skew: Option<f64>,
    /// Distribution JSON (`{"layers": [[...], ...]}`).
    #[arg(long)]
    pub distribution: Option<PathBuf>,
    /// Tokens per layer; shorthand for `--batch 1 --seq-len N`.
    #[arg(long, conflicts_with_all = ["batch", "seq_len"])]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    /// Layers to generate from a single-layer distribution.
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    /// Trace JSONL file.
    #[arg(long)]
    pub trace: PathBuf,
    /// Expert count; inferred from the largest id when omitted.
    #[arg(long)]
    pub experts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[command(flatten)]
    pub input: TraceArgs,
    /// Pseudo-count added to every expert.
    #[arg(long)]
    pub smoothing: Option<f64>,
    /// Previous estimate to fold this trace into.
    #[arg(long)]
    pub previous: Option<PathBuf>,
    /// Exponential update weight of the new batch; cumulative when omitted.
    #[arg(long, requires = "previous")]
    pub decay: Option<f64>,
    /// Ground-truth distribution JSON for an error report.
    #[arg(long, conflicts_with = "truth_skew")]
    pub truth: Option<PathBuf>,
    /// Ground truth given as a synthetic skewness.
    #[arg(long)]
    pub truth_skew: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DuplicateArgs {
    #[command(flatten)]
    pub input: TraceArgs,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// Initial placement JSON; round-robin over `--gpus` when omitted.
    #[arg(long)]
    pub placement: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub gpus: usize,
    #[arg(long)]
    pub max_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Report all layers instead of one.
    #[arg(long)]
    pub prefill: bool,
    /// Overhead curve JSON, replacing any curve in the config.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RecommendArgs {
    /// Overhead curve JSON, replacing any curve in the config.
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

/// Input of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    pub model: ModelConfig,
    pub workload: WorkloadConfig,
    pub hardware: HardwareConfig,
    #[serde(default = "PredictorSpec::none")]
    pub strategy: PredictorSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curve: Option<OverheadCurve>,
    #[serde(default)]
    pub options: SimOptions,
}

#[derive(Debug, Serialize)]
struct LayerStats {
    layer: usize,
    tokens: usize,
    counts: Vec<u64>,
    skewness: f64,
}

#[derive(Debug, Serialize)]
struct TraceStats {
    num_experts: usize,
    top_k: usize,
    tokens: usize,
    mean_skewness: f64,
    layers: Vec<LayerStats>,
}

#[derive(Debug, Serialize)]
struct EstimateReport {
    #[serde(flatten)]
    estimate: DistributionEstimate,
    #[serde(skip_serializing_if = "Option::is_none")]
    error_rate: Option<f64>,
}

#[derive(Debug, Serialize)]
struct DuplicateReport {
    layer: usize,
    #[serde(flatten)]
    outcome: crate::duplication::BalanceOutcome,
    report: BalanceReport,
}

#[derive(Debug, Serialize)]
struct SweepOutput {
    records: Vec<SweepRecord>,
    savings: Vec<SavingsRow>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on invalid input, 2 on I/O failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenTrace(a) => gen_trace(g, a),
        Command::TraceStats(a) => trace_stats(g, a),
        Command::Estimate(a) => estimate(g, a),
        Command::Duplicate(a) => duplicate(g, a),
        Command::Simulate(a) => simulate(g, a),
        Command::Sweep => sweep_cmd(g),
        Command::Recommend(a) => recommend(g, a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| {
        if e.is_io() {
            Error::Json(e)
        } else {
            Error::invalid(format!("{}: {e}", path.display()))
        }
    })
}

fn require_config(g: &GlobalArgs) -> Result<&Path> {
    g.config
        .as_deref()
        .ok_or_else(|| Error::invalid("--config <file> is required"))
}

fn read_trace(a: &TraceArgs) -> Result<ExpertTrace> {
    ExpertTrace::read_jsonl(open(&a.trace)?, a.experts)
}

fn read_curve(
    path: &Option<PathBuf>,
    fallback: Option<OverheadCurve>,
) -> Result<Option<OverheadCurve>> {
    match path {
        Some(p) => {
            let mut text = String::new();
            io::Read::read_to_string(&mut open(p)?, &mut text)?;
            OverheadCurve::from_json(&text).map(Some)
        }
        None => Ok(fallback),
    }
}

/// Runs `body` against `--out` or stdout and flushes.
fn emit(g: &GlobalArgs, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match &g.out {
        Some(path) => {
            let file = File::create(path).map_err(|e| {
                Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
            })?;
            let mut w = BufWriter::new(file);
            body(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = stdout.lock();
            body(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn emit_json<T: Serialize>(g: &GlobalArgs, value: &T) -> Result<()> {
    emit(g, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

fn json_only(g: &GlobalArgs, command: &str) -> Result<()> {
    match g.format {
        Format::Json => Ok(()),
        Format::Csv => Err(Error::invalid(format!("{command} has no csv output"))),
    }
}

fn gen_trace(g: &GlobalArgs, a: &GenTraceArgs) -> Result<()> {
    let mut dist = match (&a.distribution, a.skew) {
        (Some(path), _) => {
            let d: TokenDistribution = read_json(path)?;
            if let Some(e) = a.experts.filter(|&e| e != d.num_experts()) {
                return Err(Error::invalid(format!(
                    "--experts {e} does not match the distribution's {} experts",
                    d.num_experts()
                )));
            }
            d
        }
        (None, Some(s)) => {
            let e = a
                .experts
                .ok_or_else(|| Error::invalid("--skew needs --experts"))?;
            distribution_from_skewness(e, s)?
        }
        (None, None) => {
            return Err(Error::invalid(
                "one of --skew or --distribution is required",
            ))
        }
    };
    if let Some(n) = a.layers {
        if dist.num_layers() != 1 {
            return Err(Error::invalid("--layers needs a single-layer distribution"));
        }
        dist = TokenDistribution::repeated(dist.layer(0).to_vec(), n)?;
    }
    let workload = match (a.tokens, a.batch, a.seq_len) {
        (Some(t), _, _) => WorkloadConfig {
            batch_size: 1,
            seq_len: t,
            skewness: None,
        },
        (None, b, Some(s)) => WorkloadConfig {
            batch_size: b.unwrap_or(1),
            seq_len: s,
            skewness: None,
        },
        (None, _, None) => return Err(Error::invalid("one of --tokens or --seq-len is required")),
    };
    if g.format == Format::Csv {
        return Err(Error::invalid("gen-trace writes JSONL only"));
    }
    let trace = sample_trace(&dist, &workload, a.top_k, g.seed.unwrap_or(0))?;
    emit(g, |w| trace.write_jsonl(w))
}

fn trace_stats(g: &GlobalArgs, a: &TraceArgs) -> Result<()> {
    let trace = read_trace(a)?;
    let skews = trace.layer_skewness()?;
    let layers: Vec<LayerStats> = skews
        .iter()
        .enumerate()
        .map(|(l, &skewness)| LayerStats {
            layer: l,
            tokens: trace.layer(l).token_count(),
            counts: trace.counts(l),
            skewness,
        })
        .collect();
    match g.format {
        Format::Json => emit_json(
            g,
            &TraceStats {
                num_experts: trace.num_experts(),
                top_k: trace.top_k(),
                tokens: trace.token_count(),
                mean_skewness: trace.mean_skewness()?,
                layers,
            },
        ),
        Format::Csv => emit(g, |w| {
            let mut out = csv::Writer::from_writer(w);
            let mut header = vec!["layer".to_string(), "tokens".into(), "skewness".into()];
            header.extend((0..trace.num_experts()).map(|i| format!("count_{i}")));
            out.write_record(&header)?;
            for s in &layers {
                let mut row = vec![
                    s.layer.to_string(),
                    s.tokens.to_string(),
                    s.skewness.to_string(),
                ];
                row.extend(s.counts.iter().map(u64::to_string));
                out.write_record(&row)?;
            }
            out.flush()?;
            Ok(())
        }),
    }
}

fn estimate(g: &GlobalArgs, a: &EstimateArgs) -> Result<()> {
    json_only(g, "estimate")?;
    let trace = read_trace(&a.input)?;
    let est = match &a.previous {
        Some(path) => {
            if a.smoothing.is_some() {
                return Err(Error::invalid(
                    "--smoothing cannot be combined with --previous",
                ));
            }
            let prev: DistributionEstimate = read_json(path)?;
            let counts: Vec<Vec<u64>> = (0..trace.num_layers()).map(|l| trace.counts(l)).collect();
            let mode = a
                .decay
                .map_or(UpdateMode::Cumulative, UpdateMode::Exponential);
            update_moving_average(&prev, &counts, mode)?
        }
        None => match a.smoothing {
            Some(alpha) => smoothed_estimate(&trace, alpha)?,
            None => mle_estimate(&trace)?,
        },
    };
    let truth = match (&a.truth, a.truth_skew) {
        (Some(path), _) => Some(read_json::<TokenDistribution>(path)?),
        (None, Some(s)) => {
            let single = distribution_from_skewness(trace.num_experts(), s)?;
            Some(TokenDistribution::repeated(
                single.layer(0).to_vec(),
                est.num_layers(),
            )?)
        }
        (None, None) => None,
    };
    let error_rate = match truth {
        Some(t) => Some(error_rate(&est.distribution()?, &t)?),
        None => None,
    };
    emit_json(
        g,
        &EstimateReport {
            estimate: est,
            error_rate,
        },
    )
}

fn duplicate(g: &GlobalArgs, a: &DuplicateArgs) -> Result<()> {
    json_only(g, "duplicate")?;
    let trace = read_trace(&a.input)?;
    if a.layer >= trace.num_layers() {
        return Err(Error::invalid(format!(
            "layer {} out of range (trace has {})",
            a.layer,
            trace.num_layers()
        )));
    }
    let placement = match &a.placement {
        Some(path) => read_json::<Placement>(path)?,
        None => Placement::round_robin(trace.num_experts(), a.gpus)?,
    };
    if placement.num_experts() != trace.num_experts() {
        return Err(Error::invalid(format!(
            "placement covers {} experts, trace has {}",
            placement.num_experts(),
            trace.num_experts()
        )));
    }
    let layer = trace.layer(a.layer);
    let outcome = match a.max_iterations {
        Some(cap) => balance_with_cap(layer, &placement, cap)?,
        None => balance_by_duplication(layer, &placement)?,
    };
    let report = verify_balance(layer, &outcome.placement, &outcome.dispatch);
    emit_json(
        g,
        &DuplicateReport {
            layer: a.layer,
            outcome,
            report,
        },
    )
}

fn simulate(g: &GlobalArgs, a: &SimulateArgs) -> Result<()> {
    let cfg: SimulateConfig = read_json(require_config(g)?)?;
    let curve = read_curve(&a.curve, cfg.curve.clone())?;
    let run = if a.prefill {
        simulate_prefill
    } else {
        simulate_layer
    };
    let b: LatencyBreakdown = run(
        &cfg.strategy,
        &cfg.model,
        &cfg.workload,
        &cfg.hardware,
        curve.as_ref(),
        &cfg.options,
    )?;
    match g.format {
        Format::Json => emit_json(g, &b),
        Format::Csv => {
            let record = SweepRecord {
                hardware_id: "config".into(),
                link_bandwidth: cfg.hardware.link_bandwidth,
                skewness: cfg.workload.require_skewness()?,
                strategy: cfg.strategy.kind,
                accuracy: cfg.strategy.accuracy,
                error_rate: cfg.strategy.error_rate,
                breakdown: b,
            };
            emit(g, |w| sweep::write_csv(std::slice::from_ref(&record), w))
        }
    }
}

fn sweep_cmd(g: &GlobalArgs) -> Result<()> {
    let mut grid: SweepGrid = read_json(require_config(g)?)?;
    if let Some(seed) = g.seed {
        grid.distribution_error = grid.distribution_error.with_seed(seed);
    }
    let records = run_sweep(&grid)?;
    match g.format {
        Format::Json => {
            let savings = savings_table(&records);
            emit_json(g, &SweepOutput { records, savings })
        }
        Format::Csv => emit(g, |w| sweep::write_csv(&records, w)),
    }
}

fn recommend(g: &GlobalArgs, a: &RecommendArgs) -> Result<()> {
    json_only(g, "recommend")?;
    let mut cfg: RecommendConfig = read_json(require_config(g)?)?;
    cfg.curve = read_curve(&a.curve, cfg.curve.take())?;
    if let Some(seed) = g.seed {
        cfg.distribution_error = cfg.distribution_error.with_seed(seed);
    }
    let rec = sweep::recommend(&cfg)?;
    for w in &rec.warnings {
        log::warn!("{w}");
    }
    emit_json(g, &rec)
}
