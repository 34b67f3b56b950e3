//! `dom2` command line: dataset generation, augmentation, training,
//! evaluation and plotting. Failures print one JSON line on stderr and exit
//! with 2 (usage), 3 (io), 4 (schema, version or dimension) or 1 (anything else).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dom2_core::datasets::{generate_dataset, Dataset, Quality, ReturnKind, Thresholds};
use dom2_core::envs::EnvId;
use dom2_core::evaluation::{emit_plots, k_eval, EvalReport, PlotInput, Point, Series};
use dom2_core::training::{learner_names, run_training, Checkpoint, MetricsRecord, TrainConfig, TrainedPolicy};
use dom2_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dom2", version, about = "Diffusion offline multi-agent RL toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out a scripted behavior policy into a dataset file.
    GenData(GenData),
    /// Replicate high-return trajectories once per threshold they reach.
    Augment(Augment),
    /// Train a learner on a dataset.
    Train(Train),
    /// Evaluate a checkpoint with the K-rollout protocol.
    Eval(Eval),
    /// Draw evaluation reports or metrics streams as one SVG chart.
    Plot(Plot),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, value_parser = parse_env)]
    env: EnvId,
    #[arg(long, value_parser = parse_quality)]
    quality: Quality,
    #[arg(long)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ReturnArg {
    Joint,
    PerAgentMean,
}

impl From<ReturnArg> for ReturnKind {
    fn from(r: ReturnArg) -> Self {
        match r {
            ReturnArg::Joint => ReturnKind::Joint,
            ReturnArg::PerAgentMean => ReturnKind::PerAgentMean,
        }
    }
}

#[derive(Args, Debug)]
struct Augment {
    #[arg(long = "in")]
    input: PathBuf,
    /// Comma-separated return thresholds, or `auto` for the 50/70/90% quantiles.
    #[arg(long, value_parser = parse_thresholds)]
    thresholds: Thresholds,
    #[arg(long, value_enum, default_value = "joint")]
    return_kind: ReturnArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Train {
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Overrides the config's algorithm.
    #[arg(long, value_parser = parse_algo)]
    algo: Option<String>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from this checkpoint, appending to the metrics stream in `--out-dir`.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Environment with optional shift suffix; defaults to the training environment.
    #[arg(long, value_parser = parse_env)]
    env: Option<EnvId>,
    /// Rollouts per initial condition; the best one counts.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Initial conditions. Defaults to `--episodes / --k`.
    #[arg(long)]
    groups: Option<usize>,
    /// Total episode budget, used when `--groups` is absent.
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Extra `key=value` labels stored in the report.
    #[arg(long = "tag", value_parser = parse_tag)]
    tags: Vec<(String, String)>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Plot {
    /// Evaluation reports (JSON) or training metrics streams (JSON Lines).
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_env(s: &str) -> Result<EnvId, String> {
    s.parse::<EnvId>().map_err(|e| e.to_string())
}

fn parse_quality(s: &str) -> Result<Quality, String> {
    s.parse::<Quality>().map_err(|e| e.to_string())
}

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    s.parse::<Thresholds>().map_err(|e| e.to_string())
}

fn parse_algo(s: &str) -> Result<String, String> {
    if learner_names().contains(&s) {
        Ok(s.to_string())
    } else {
        Err(format!(
            "unknown algorithm `{s}` (known: {})",
            learner_names().join(", ")
        ))
    }
}

fn parse_tag(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("tag `{s}` is not key=value")),
    }
}

/// A failure with its exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Io { .. } => (3, "io"),
            Error::Schema(_) | Error::Json(_) => (4, "schema"),
            Error::Version { .. } => (4, "version"),
            Error::Dimension(_) => (4, "dimension"),
            Error::Config(_) | Error::Lookup { .. } => (2, "config"),
            Error::Contract(_) => (1, "contract"),
            Error::Domain(_) => (1, "domain"),
            Error::Numerical(_) => (1, "numerical"),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<Value, Failure>;

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn require_file(path: &Path) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")).into())
    }
}

fn gen_data(a: GenData) -> CmdResult {
    if a.episodes == 0 {
        return Err(Failure::usage("--episodes must be positive"));
    }
    let data = generate_dataset(&a.env, a.quality, a.episodes, a.seed)?;
    data.save(&a.out)?;
    let m = data.manifest();
    Ok(json!({"out": a.out, "trajectories": m.trajectories, "transitions": m.transitions}))
}

fn augment(a: Augment) -> CmdResult {
    require_file(&a.input)?;
    if same_file(&a.input, &a.out) {
        return Err(Failure::usage("--out must differ from --in"));
    }
    let data = Dataset::load(&a.input)?;
    let kind = a.return_kind.into();
    let thresholds = a.thresholds.resolve(&data, kind)?;
    let out = data.augment(&thresholds, kind);
    out.save(&a.out)?;
    Ok(json!({"out": a.out, "thresholds": thresholds, "trajectories": out.len()}))
}

fn train(a: Train) -> CmdResult {
    let mut config = match &a.config {
        Some(path) => {
            require_file(path)?;
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            TrainConfig::from_json(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(algo) = a.algo {
        config.algo = algo;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    config.validate()?;
    require_file(&a.data)?;
    if let Some(r) = &a.resume {
        require_file(r)?;
    }
    let outcome = run_training(config, &a.data, &a.out_dir, a.resume.as_deref())?;
    Ok(json!({"steps": outcome.steps, "checkpoint": outcome.checkpoint, "metrics": outcome.metrics}))
}

fn eval(a: Eval) -> CmdResult {
    if a.k == 0 {
        return Err(Failure::usage("--k must be at least 1"));
    }
    let groups = match a.groups {
        Some(g) => g,
        None if a.episodes.is_multiple_of(a.k) => a.episodes / a.k,
        None => return Err(Failure::usage("--episodes must be a multiple of --k")),
    };
    if groups == 0 {
        return Err(Failure::usage("need at least one group"));
    }
    require_file(&a.checkpoint)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let trained = TrainedPolicy::from_checkpoint(&ckpt)?;
    let env = match a.env {
        Some(env) => env,
        None => ckpt.header.env_id.parse()?,
    };
    let algo = ckpt.header.config.algo.clone();
    let mut report = k_eval(&trained.policy(), &env, &algo, groups, a.k, a.seed)?;
    report.tags.insert("algo".into(), algo);
    report
        .tags
        .insert("train_seed".into(), ckpt.header.config.seed.to_string());
    report.tags.insert("train_env".into(), ckpt.header.env_id.clone());
    report.tags.extend(a.tags);
    report.save(&a.out)?;
    Ok(json!({"out": a.out, "mean": report.mean, "std": report.std, "normalized_score": report.normalized_score}))
}

/// Reads a metrics stream into an evaluation-return curve.
fn metrics_series(path: &Path, text: &str) -> Result<Series, Failure> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: MetricsRecord =
            serde_json::from_str(line).map_err(|e| Error::Schema(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if let (None, Some(mean)) = (r.agent, r.eval_return_mean) {
            points.push(Point {
                x: r.step as f64,
                mean,
                std: r.eval_return_std.unwrap_or(0.0),
            });
        }
    }
    let label = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Series { label, points })
}

fn plot(a: Plot) -> CmdResult {
    let mut reports = Vec::new();
    let mut series = Vec::new();
    for path in &a.inputs {
        require_file(path)?;
        if same_file(path, &a.out) {
            return Err(Failure::usage("--out must differ from every --in"));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        match serde_json::from_str::<EvalReport>(&text) {
            Ok(r) => reports.push(r),
            Err(_) => series.push(metrics_series(path, &text)?),
        }
    }
    let input = match (reports.is_empty(), series.is_empty()) {
        (false, true) => PlotInput::Reports(reports),
        (true, false) => PlotInput::Curves {
            title: "Evaluation return during training".into(),
            x_label: "training step".into(),
            y_label: "joint return".into(),
            series,
        },
        _ => {
            return Err(Failure::usage(
                "cannot mix evaluation reports and metrics streams in one chart",
            ))
        }
    };
    let summary = emit_plots(&input, &a.out)?;
    Ok(json!({"out": a.out, "groups": summary.groups, "bars": summary.bars, "lines": summary.lines}))
}

fn run(argv: impl IntoIterator<Item = OsString>) -> Result<Option<Value>, Failure> {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(None);
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(Failure::usage(first.trim_start_matches("error: ")));
        }
    };
    let out = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Augment(a) => augment(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot(a),
    }?;
    Ok(Some(out))
}

fn main() -> ExitCode {
    match run(std::env::args_os()) {
        Ok(Some(summary)) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(f) => {
            let line: BTreeMap<&str, Value> = BTreeMap::from([
                ("error", json!(f.kind)),
                ("message", json!(f.message)),
                ("code", json!(f.code)),
            ]);
            eprintln!("{}", json!(line));
            ExitCode::from(f.code)
        }
    }
}
