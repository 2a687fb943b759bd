//! `orca`: generate → train → calibrate → run → sweep → report.
//!
//! Exit codes: 0 success, 1 usage, 2 input/format, 3 numeric failure,
//! 4 no certifiable threshold (outputs are still written). Every error is
//! printed on one line as `orca: error[<kind>]: <message>`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use orca_core::io::report::{calibration_csv, epochs_csv, render_report, savings_csv, trace_csv};
use orca_core::io::{
    emit_report, read_calibration, read_model, read_trajectories, write_calibration, write_model,
    write_trajectories, ModelArtifact, Report, ReportFormat, TrajectoryFormat,
};
use orca_core::meta::EpochReport;
use orca_core::runtime::{dump_trajectory_trace, SweepRow};
use orca_core::synth::split_by_ratio;
use orca_core::*;

#[derive(Parser)]
#[command(name = "orca", version, about = "Calibrated early stopping with online-adaptive probes")]
struct Cli {
    /// Seed for generation, splitting and training.
    #[arg(long, global = true, env = "ORCA_SEED", default_value_t = 0)]
    seed: u64,
    /// Worker-thread cap; never changes any output byte.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Suppress progress notes on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic trajectories split into train/cal/test files.
    Gen(GenArgs),
    /// Meta-train a probe (or the static baseline).
    Train(TrainArgs),
    /// Select the stopping threshold on a calibration set.
    Calibrate(CalibrateArgs),
    /// Deploy a calibrated rule on a data set.
    Run(RunArgs),
    /// Calibrate and evaluate over a list of risk levels.
    Sweep(SweepArgs),
    /// Re-render stored results as CSV or SVG.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FileFormat {
    Text,
    Binary,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    count: usize,
    #[arg(long, default_value = "3:1:1")]
    split: String,
    /// Output directory; files are named train/cal/test (or part<i>).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FileFormat::Text)]
    format: FileFormat,
    /// Apply the reference out-of-distribution shift.
    #[arg(long)]
    shifted: bool,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    p_neg: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    drift: Option<f64>,
    #[arg(long)]
    churn: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model artifact path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV; defaults to `<out>.epochs.csv`.
    #[arg(long)]
    epochs_csv: Option<PathBuf>,
    #[arg(long, default_value = "no-qk")]
    variant: Variant,
    /// Projection width for qk / shared-qk.
    #[arg(long)]
    dh: Option<usize>,
    #[arg(long, default_value = "supervised")]
    mode: LabelSource,
    #[arg(long, default_value = "pseudo-zero")]
    inner_policy: InnerLabelPolicy,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value = "full")]
    truncation: Truncation,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    outer_lr: f64,
    #[arg(long, default_value_t = 0.01)]
    inner_lr: f64,
    #[arg(long, default_value_t = 10)]
    window: usize,
    /// Meta-learn η as well.
    #[arg(long)]
    learn_eta: bool,
    /// Train the static (η = 0) baseline instead.
    #[arg(long = "static")]
    static_baseline: bool,
}

#[derive(Args)]
struct RiskArgs {
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// `uniform` (0.99 → 0.01), `uniform:<m>` or `scores:<m>`.
    #[arg(long, default_value = "uniform")]
    grid: String,
    #[arg(long, default_value = "emitted-incorrect")]
    loss_mode: LossMode,
    /// Step budget; defaults to the longest trajectory in the data.
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cal: PathBuf,
    #[arg(long)]
    delta: f64,
    #[command(flatten)]
    risk: RiskArgs,
    /// Calibration result (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Optional per-threshold CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Evaluation report CSV.
    #[arg(long)]
    out: PathBuf,
    /// Per-problem savings CSV.
    #[arg(long)]
    savings: Option<PathBuf>,
    /// Directory for per-trajectory trace CSV/SVG files.
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    trace_limit: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cal: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15,0.2")]
    deltas: Vec<f64>,
    #[command(flatten)]
    risk: RiskArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Sweep,
    Calibration,
    Epochs,
}

#[derive(Args)]
struct ReportArgs {
    /// A sweep CSV, calibration JSON or epoch CSV.
    #[arg(long)]
    input: PathBuf,
    /// Inferred from the input when omitted.
    #[arg(long, value_enum)]
    kind: Option<ReportKind>,
    #[arg(long, default_value = "svg")]
    format: ReportFormat,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Lib(OrcaError),
}

impl From<OrcaError> for Failure {
    fn from(e: OrcaError) -> Self {
        Failure::Lib(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

enum Outcome {
    Done,
    NoThreshold(String),
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn input(msg: impl Into<String>) -> Failure {
    Failure::Lib(OrcaError::Input(msg.into()))
}

struct Ctx {
    seed: u64,
    quiet: bool,
}

impl Ctx {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("orca: {}", msg.as_ref());
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report_failure(Failure::Usage(e.kind().to_string())),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return report_failure(usage("--threads must be positive"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return report_failure(Failure::Lib(OrcaError::Internal(e.to_string())));
        }
    }
    let ctx = Ctx { seed: cli.seed, quiet: cli.quiet };
    let result = match cli.command {
        Command::Gen(a) => gen(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Calibrate(a) => calibrate_cmd(&ctx, a),
        Command::Run(a) => run_cmd(&ctx, a),
        Command::Sweep(a) => sweep_cmd(&ctx, a),
        Command::Report(a) => report_cmd(&ctx, a),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NoThreshold(detail)) => {
            println!("orca: notice[no-threshold]: {detail}");
            ExitCode::from(4)
        }
        Err(f) => report_failure(f),
    }
}

fn report_failure(f: Failure) -> ExitCode {
    let (kind, code, msg) = match f {
        Failure::Usage(m) => ("usage", 1, m),
        Failure::Lib(e) => {
            let (kind, code) = match &e {
                OrcaError::Numeric(_) | OrcaError::Divergence { .. } => ("numeric", 3),
                OrcaError::Format(_) | OrcaError::Checksum { .. } => ("format", 2),
                OrcaError::Io(_) => ("io", 2),
                OrcaError::Contract(_) | OrcaError::Input(_) => ("input", 2),
                OrcaError::Internal(_) => ("internal", 3),
            };
            (kind, code, e.to_string())
        }
    };
    eprintln!("orca: error[{kind}]: {}", msg.replace('\n', " "));
    ExitCode::from(code)
}

fn parse_split(s: &str) -> CliResult<Vec<usize>> {
    let parts: Vec<usize> = s
        .split(':')
        .map(|p| p.trim().parse().map_err(|_| usage(format!("bad --split `{s}`"))))
        .collect::<CliResult<_>>()?;
    if parts.iter().sum::<usize>() == 0 {
        return Err(usage(format!("--split `{s}` has no positive part")));
    }
    Ok(parts)
}

fn gen(ctx: &Ctx, a: GenArgs) -> CliResult<Outcome> {
    let ratios = parse_split(&a.split)?;
    let mut cfg = if a.shifted { SynthConfig::reference_shifted(ctx.seed) } else { SynthConfig::reference(ctx.seed) };
    if let Some(d) = a.dim {
        cfg.embed_dim = d;
        cfg.pre_mean.resize(d, 0.0);
        cfg.post_mean.resize(d, 0.0);
        if let Some(shift) = cfg.shift.as_mut() {
            shift.translation.resize(d, 0.0);
            if shift.rotation.is_some_and(|r| r.axis_a.max(r.axis_b) >= d) {
                shift.rotation = None;
            }
        }
    }
    cfg.length_min = a.min_len.unwrap_or(cfg.length_min);
    cfg.length_max = a.max_len.unwrap_or(cfg.length_max);
    cfg.p_neg = a.p_neg.unwrap_or(cfg.p_neg);
    cfg.noise_scale = a.noise.unwrap_or(cfg.noise_scale);
    cfg.drift_coeff = a.drift.unwrap_or(cfg.drift_coeff);
    cfg.answer_churn = a.churn.unwrap_or(cfg.answer_churn);
    let data = generate_dataset(&cfg, a.count)?;
    let parts = split_by_ratio(&data, &ratios, ctx.seed)?;
    fs::create_dir_all(&a.out).map_err(OrcaError::from)?;
    let (format, ext) = match a.format {
        FileFormat::Text => (TrajectoryFormat::Text, "jsonl"),
        FileFormat::Binary => (TrajectoryFormat::Binary, "bin"),
    };
    let names: Vec<String> = if parts.len() == 3 {
        ["train", "cal", "test"].iter().map(|s| s.to_string()).collect()
    } else {
        (0..parts.len()).map(|i| format!("part{i}")).collect()
    };
    for (name, part) in names.iter().zip(&parts) {
        let path = a.out.join(format!("{name}.{ext}"));
        write_trajectories(&path, part, format)?;
        ctx.note(format!("wrote {} trajectories to {}", part.len(), path.display()));
    }
    Ok(Outcome::Done)
}

fn load_data(path: &Path) -> CliResult<Vec<Trajectory>> {
    let data = read_trajectories(path)?;
    if data.is_empty() {
        return Err(input(format!("{} holds no trajectories", path.display())));
    }
    Ok(data)
}

fn embed_dim_of(data: &[Trajectory]) -> CliResult<usize> {
    for t in data {
        if let Some(d) = t.embed_dim()? {
            return Ok(d);
        }
    }
    Err(input("data set has no steps"))
}

fn train_cmd(ctx: &Ctx, a: TrainArgs) -> CliResult<Outcome> {
    let data = load_data(&a.data)?;
    let d = embed_dim_of(&data)?;
    let dh = match (a.variant, a.dh) {
        (Variant::NoQk, _) => 0,
        (_, Some(h)) => h,
        (_, None) => return Err(usage("--dh is required for qk and shared-qk")),
    };
    let probe = ProbeConfig::for_variant(a.variant, d, dh)
        .with_window(a.window)
        .with_learnable_eta(a.learn_eta && !a.static_baseline);
    let mut tcfg = TrainConfig::for_variant(a.variant);
    tcfg.seed = ctx.seed;
    tcfg.epochs = a.epochs.unwrap_or(tcfg.epochs);
    tcfg.truncation = a.truncation;
    tcfg.inner_label_policy = a.inner_policy;
    tcfg.batch = a.batch;
    tcfg.outer_lr = a.outer_lr;
    tcfg.inner_lr = a.inner_lr;
    let mode = LabelMode { source: a.mode, cumulative: true };
    ctx.note(format!("training {} on {} trajectories for {} epochs", probe.variant, data.len(), tcfg.epochs));
    let outcome = if a.static_baseline {
        train_static(&data, &probe, &tcfg, mode)?
    } else {
        train(&data, &probe, &tcfg, mode)?
    };
    let probe = if a.static_baseline { probe.with_learnable_eta(false) } else { probe };
    let mut artifact = ModelArtifact::new(probe, outcome.weights, mode);
    artifact.train = Some(tcfg);
    artifact.static_baseline = a.static_baseline;
    write_model(&a.out, &artifact)?;
    let epochs_path = a.epochs_csv.unwrap_or_else(|| with_suffix(&a.out, ".epochs.csv"));
    fs::write(&epochs_path, epochs_csv(&outcome.reports)).map_err(OrcaError::from)?;
    if let Some(last) = outcome.reports.last() {
        ctx.note(format!("final mean outer loss {:.6}", last.mean_outer_loss));
    }
    Ok(Outcome::Done)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn parse_grid(spec: &str, model: &ModelArtifact, cal: &[Trajectory], budget: usize) -> CliResult<ThresholdGrid> {
    let (kind, m) = match spec.split_once(':') {
        Some((k, m)) => (k, Some(m.parse::<usize>().map_err(|_| usage(format!("bad --grid `{spec}`")))?)),
        None => (spec, None),
    };
    match (kind, m) {
        ("uniform", None) => Ok(ThresholdGrid::default_uniform()),
        ("uniform", Some(m)) => Ok(ThresholdGrid::uniform(m, 0.01, 0.99)?),
        ("scores", Some(m)) => {
            let mut scores = Vec::new();
            for t in cal {
                let run = run_with_stopping(&model.weights, &model.probe, None, t, budget)?;
                scores.extend(run.smoothed_scores);
            }
            Ok(ThresholdGrid::from_scores(&scores, m)?)
        }
        _ => Err(usage(format!("bad --grid `{spec}`"))),
    }
}

fn risk_spec(delta: f64, r: &RiskArgs, data: &[Trajectory]) -> CliResult<RiskSpec> {
    let budget = r.budget.unwrap_or_else(|| data.iter().map(Trajectory::len).max().unwrap_or(1));
    Ok(RiskSpec::new(delta, r.epsilon, budget)?.with_loss_mode(r.loss_mode))
}

fn calibrate_cmd(ctx: &Ctx, a: CalibrateArgs) -> CliResult<Outcome> {
    let model = read_model(&a.model)?;
    let cal = load_data(&a.cal)?;
    let spec = risk_spec(a.delta, &a.risk, &cal)?;
    let grid = parse_grid(&a.risk.grid, &model, &cal, spec.budget)?;
    let result = calibrate(&model.weights, &cal, &grid, &spec, &model.probe, model.label_mode)?;
    write_calibration(&a.out, &result)?;
    if let Some(path) = &a.csv {
        fs::write(path, calibration_csv(&result)).map_err(OrcaError::from)?;
    }
    match result.lambda_star {
        Some(l) => {
            ctx.note(format!("lambda* = {l} ({} of {} thresholds rejected)", result.rejected_count(), grid.len()));
            Ok(Outcome::Done)
        }
        None => {
            let p = result.records.first().map_or(1.0, |r| r.p_value);
            Ok(Outcome::NoThreshold(format!(
                "n={} delta={} epsilon={} first_p_value={p}",
                result.n, spec.delta, spec.epsilon
            )))
        }
    }
}

fn run_cmd(ctx: &Ctx, a: RunArgs) -> CliResult<Outcome> {
    let model = read_model(&a.model)?;
    let calib = read_calibration(&a.calib)?;
    let data = load_data(&a.data)?;
    let spec = calib.spec;
    let report = evaluate_set(&model.weights, &model.probe, calib.lambda_star, &data, &spec, model.label_mode)?;
    emit_report(Report::Eval(&report), &a.out, ReportFormat::Csv)?;
    if let Some(path) = &a.savings {
        fs::write(path, savings_csv(&report.per_problem_savings)).map_err(OrcaError::from)?;
    }
    if let Some(dir) = &a.traces {
        fs::create_dir_all(dir).map_err(OrcaError::from)?;
        for traj in data.iter().take(a.trace_limit) {
            let labels = build_labels(traj, model.label_mode).ok();
            let trace = dump_trajectory_trace(&model.weights, &model.probe, calib.lambda_star, traj, labels.as_deref())?;
            fs::write(dir.join(format!("trace_{}.csv", traj.id)), trace_csv(&trace)).map_err(OrcaError::from)?;
            emit_report(Report::Trace(&trace), &dir.join(format!("trace_{}.svg", traj.id)), ReportFormat::Svg)?;
        }
    }
    ctx.note(format!(
        "n={} savings={:.4} error={:.4}",
        report.n, report.mean_step_savings, report.error_rate
    ));
    Ok(Outcome::Done)
}

fn sweep_cmd(ctx: &Ctx, a: SweepArgs) -> CliResult<Outcome> {
    if a.deltas.is_empty() {
        return Err(usage("--deltas is empty"));
    }
    let model = read_model(&a.model)?;
    let cal = load_data(&a.cal)?;
    let test = load_data(&a.test)?;
    let spec = risk_spec(a.deltas[0], &a.risk, &cal)?;
    let grid = parse_grid(&a.risk.grid, &model, &cal, spec.budget)?;
    let rows = risk_savings_sweep(
        &model.weights,
        &model.probe,
        &cal,
        &test,
        &a.deltas,
        &grid,
        &spec,
        model.label_mode,
    )?;
    emit_report(Report::Sweep(&rows), &a.out, ReportFormat::Csv)?;
    if let Some(path) = &a.svg {
        emit_report(Report::Sweep(&rows), path, ReportFormat::Svg)?;
    }
    for r in &rows {
        ctx.note(format!("delta={} savings={:.4} error={:.4}", r.delta, r.savings_step, r.error_rate));
    }
    Ok(Outcome::Done)
}

fn report_cmd(ctx: &Ctx, a: ReportArgs) -> CliResult<Outcome> {
    let kind = match a.kind {
        Some(k) => k,
        None => infer_kind(&a.input)?,
    };
    let out = match kind {
        ReportKind::Calibration => {
            let c = read_calibration(&a.input)?;
            render_report(Report::Calibration(&c), a.format)?
        }
        ReportKind::Sweep => {
            let rows = parse_sweep_csv(&read_text(&a.input)?)?;
            render_report(Report::Sweep(&rows), a.format)?
        }
        ReportKind::Epochs => {
            let reports = parse_epochs_csv(&read_text(&a.input)?)?;
            render_report(Report::Epochs(&reports), a.format)?
        }
    };
    fs::write(&a.out, out).map_err(OrcaError::from)?;
    ctx.note(format!("wrote {}", a.out.display()));
    Ok(Outcome::Done)
}

fn read_text(path: &Path) -> CliResult<String> {
    Ok(fs::read_to_string(path).map_err(OrcaError::from)?)
}

fn infer_kind(path: &Path) -> CliResult<ReportKind> {
    let text = read_text(path)?;
    let first = text.lines().next().unwrap_or("").trim();
    if first.starts_with('{') {
        Ok(ReportKind::Calibration)
    } else if first.starts_with("delta,") {
        Ok(ReportKind::Sweep)
    } else if first.starts_with("epoch,") {
        Ok(ReportKind::Epochs)
    } else {
        Err(usage(format!("cannot infer report kind of {}; pass --kind", path.display())))
    }
}

fn csv_rows<'a>(text: &'a str, header: &str) -> CliResult<impl Iterator<Item = (usize, Vec<&'a str>)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Failure::Lib(OrcaError::Format(format!("expected CSV header `{header}`"))));
    }
    Ok(lines.filter(|l| !l.trim().is_empty()).enumerate().map(|(i, l)| (i + 2, l.split(',').collect())))
}

fn field<T: std::str::FromStr>(cols: &[&str], i: usize, line: usize) -> CliResult<T> {
    cols.get(i)
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| Failure::Lib(OrcaError::Format(format!("bad field {} on line {line}", i + 1))))
}

fn opt_field(cols: &[&str], i: usize, line: usize) -> CliResult<Option<f64>> {
    match cols.get(i).map(|c| c.trim()) {
        Some("") => Ok(None),
        _ => field(cols, i, line).map(Some),
    }
}

fn parse_sweep_csv(text: &str) -> CliResult<Vec<SweepRow>> {
    csv_rows(text, "delta,lambda_star,savings_step,savings_token,error_rate,n")?
        .map(|(line, c)| {
            Ok(SweepRow {
                delta: field(&c, 0, line)?,
                lambda_star: opt_field(&c, 1, line)?,
                savings_step: field(&c, 2, line)?,
                savings_token: opt_field(&c, 3, line)?,
                error_rate: field(&c, 4, line)?,
                n: field(&c, 5, line)?,
            })
        })
        .collect()
}

fn parse_epochs_csv(text: &str) -> CliResult<Vec<EpochReport>> {
    csv_rows(text, "epoch,mean_outer_loss")?
        .map(|(line, c)| {
            Ok(EpochReport {
                epoch: field(&c, 0, line)?,
                mean_outer_loss: field(&c, 1, line)?,
                wall_time_secs: 0.0,
            })
        })
        .collect()
}
