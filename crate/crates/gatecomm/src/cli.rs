//! Subcommands.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gatecomm_core::checks::{gradient_suite, CheckKind, SuiteConfig};
use gatecomm_core::comm::CommMode;
use gatecomm_core::eval::{evaluate, export_messages};
use gatecomm_core::train::{MessageTiming, Trainer};

use crate::baseline::{run_baseline, Controller};
use crate::checkpoint::{self, checkpoint_dir, Checkpoint};
use crate::config::{RunConfig, ScenarioSpec};
use crate::error::{AppError, AppResult};
use crate::output::{self, JsonLines, LogLine, MetricsRow};

pub const TRAIN_LOG: &str = "train_log.jsonl";

#[derive(Debug, Parser)]
#[command(name = "gatecomm", version, about = "Gated-communication multi-agent traffic signal control")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a run configuration, or resume from a checkpoint.
    Train(TrainArgs),
    /// Greedy evaluation of a checkpoint under one or all communication modes.
    Evaluate(EvaluateArgs),
    /// Run a classical controller on a scenario.
    Baseline(BaselineArgs),
    /// Export the messages of a trained policy as CSV.
    ExportMessages(ExportArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML).
    #[arg(long, required_unless_present = "checkpoint")]
    pub config: Option<PathBuf>,
    /// Resume from this checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total training episodes.
    #[arg(long)]
    pub episodes: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// learned, full, none or random:p
    #[arg(long)]
    pub mode: Option<String>,
    /// delayed or samestep
    #[arg(long)]
    pub message_timing: Option<String>,
    #[arg(long)]
    pub double_q: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// learned, full, none, random:p or all
    #[arg(long, default_value = "learned")]
    pub mode: String,
    /// Defaults to the run's evaluation episode count.
    #[arg(long)]
    pub episodes: Option<usize>,
    /// Defaults to the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub message_timing: Option<String>,
    /// Metrics CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// fixed, maxpressure, sotl, random or all
    #[arg(long, default_value = "all")]
    pub controller: String,
    /// Run configuration providing the scenario.
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    pub config: Option<PathBuf>,
    /// Scenario file.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Metrics CSV; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the event logs of every run as CSV.
    #[arg(long)]
    pub event_log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub episodes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub message_timing: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random points per primitive.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub tolerance: Option<f64>,
}

fn usage(e: gatecomm_core::Error) -> AppError {
    AppError::Usage(e.to_string())
}

fn parse_mode(s: &str) -> AppResult<CommMode> {
    CommMode::parse(s).map_err(usage)
}

fn parse_timing(s: &str) -> AppResult<MessageTiming> {
    MessageTiming::parse(s).map_err(usage)
}

/// Modes named by `--mode`; `all` expands to the four ablation settings.
pub fn parse_modes(s: &str) -> AppResult<Vec<CommMode>> {
    if s == "all" {
        return Ok(vec![CommMode::Learned, CommMode::Full, CommMode::None, CommMode::Random(0.5)]);
    }
    Ok(vec![parse_mode(s)?])
}

/// Parses `args` and runs the command, writing reports to `stdout`.
pub fn run<W: Write>(cli: Cli, stdout: &mut W) -> AppResult<()> {
    match cli.command {
        Command::Train(a) => train(a, stdout),
        Command::Evaluate(a) => cmd_evaluate(a, stdout),
        Command::Baseline(a) => baseline(a, stdout),
        Command::ExportMessages(a) => export(a, stdout),
        Command::Gradcheck(a) => gradcheck(a, stdout),
    }
}

fn say<W: Write>(stdout: &mut W, line: impl std::fmt::Display) -> AppResult<()> {
    writeln!(stdout, "{line}").map_err(AppError::io(Path::new("<stdout>")))
}

fn train<W: Write>(a: TrainArgs, stdout: &mut W) -> AppResult<()> {
    let (mut config, resume) = match &a.checkpoint {
        Some(dir) => {
            if a.seed.is_some() || a.mode.is_some() || a.message_timing.is_some() || a.double_q {
                return Err(AppError::Usage(
                    "a resumed run keeps its configuration; only --episodes and --out apply".into(),
                ));
            }
            let ck = Checkpoint::open(dir)?;
            (ck.config.clone(), Some(ck))
        }
        None => {
            let path = a.config.as_deref().expect("clap requires --config without --checkpoint");
            let mut c = RunConfig::load(path)?;
            if let Some(s) = a.seed {
                c.train.seed = s;
            }
            if let Some(m) = &a.mode {
                c.train.comm_mode = parse_mode(m)?;
            }
            if let Some(t) = &a.message_timing {
                c.train.message_timing = parse_timing(t)?;
            }
            if a.double_q {
                c.train.double_q = true;
            }
            (c, None)
        }
    };
    if let Some(n) = a.episodes {
        config.train.total_episodes = n;
    }
    if let Some(out) = &a.out {
        config.out_dir = out.clone();
    }
    config.validate()?;
    let out = config.out_dir.clone();
    config.archive(&out)?;

    let log_path = out.join(TRAIN_LOG);
    let mut trainer = match &resume {
        Some(ck) => {
            let mut t = ck.trainer()?;
            t.config.total_episodes = config.train.total_episodes;
            truncate_log(&log_path, t.episodes())?;
            t
        }
        None => {
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(AppError::io(&log_path))?;
            }
            let env = config.environment()?;
            let arch = config.arch.for_env(&env);
            Trainer::with_arch(env, config.train.clone(), arch)?
        }
    };
    let mut log = JsonLines::append(&log_path)?;
    let mut last_saved = None;
    while trainer.episodes() < trainer.config.total_episodes {
        let rec = trainer.round()?;
        if let Some(line) = LogLine::from_record(&rec) {
            log.write(&line)?;
            checkpoint::save(&checkpoint_dir(&out, rec.episode), &config, &trainer)?;
            last_saved = Some(rec.episode);
            say(
                stdout,
                format_args!(
                    "episode {:>7}  eps {:.3}  queue {:.3}  wait {:.2}  pct_comm {:.1}",
                    rec.episode, rec.epsilon, line.eval.mean_queue_length, line.eval.mean_wait_time,
                    line.eval.pct_communication
                ),
            )?;
        }
    }
    if last_saved != Some(trainer.episodes()) {
        checkpoint::save(&checkpoint_dir(&out, trainer.episodes()), &config, &trainer)?;
    }
    say(stdout, format_args!("trained {} episodes; artifacts in {}", trainer.episodes(), out.display()))
}

/// Drops log lines past `episode` so a resumed run continues the same log.
fn truncate_log(path: &Path, episode: u64) -> AppResult<()> {
    if !path.exists() {
        return Ok(());
    }
    let file = fs::File::open(path).map_err(AppError::io(path))?;
    let mut kept = String::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(AppError::io(path))?;
        let rec: LogLine = serde_json::from_str(&line)
            .map_err(|e| AppError::Parse { path: path.to_path_buf(), message: e.to_string() })?;
        if rec.episode <= episode {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(AppError::io(path))
}

fn emit_metrics<W: Write>(rows: &[MetricsRow], out: Option<&Path>, stdout: &mut W) -> AppResult<()> {
    match out {
        Some(path) => output::write_metrics(path, rows),
        None => {
            let mut w = csv::Writer::from_writer(stdout);
            for r in rows {
                w.serialize(r)?;
            }
            w.flush().map_err(AppError::io(Path::new("<stdout>")))
        }
    }
}

fn cmd_evaluate<W: Write>(a: EvaluateArgs, stdout: &mut W) -> AppResult<()> {
    let modes = parse_modes(&a.mode)?;
    let ck = Checkpoint::open(&a.checkpoint)?;
    let (nets, params) = ck.policy()?;
    let train = &ck.config.train;
    let timing = a.message_timing.as_deref().map(parse_timing).transpose()?.unwrap_or(train.message_timing);
    let episodes = a.episodes.unwrap_or(train.eval_episodes.max(1));
    let seed = a.seed.unwrap_or(train.seed);
    let mut rows = Vec::with_capacity(modes.len());
    for mode in modes {
        let m = evaluate(&nets, &params, &ck.env, episodes, mode, timing, seed)?;
        rows.push(MetricsRow::new(mode.label(), seed, &m));
    }
    emit_metrics(&rows, a.out.as_deref(), stdout)
}

fn baseline<W: Write>(a: BaselineArgs, stdout: &mut W) -> AppResult<()> {
    let controllers = if a.controller == "all" { Controller::ALL.to_vec() } else { vec![a.controller.parse()?] };
    let scenario = match (&a.config, &a.scenario) {
        (Some(c), _) => RunConfig::load(c)?.scenario()?.clone(),
        (None, Some(s)) => ScenarioSpec::load(s)?,
        (None, None) => unreachable!("clap requires --config or --scenario"),
    };
    let env = scenario.environment()?;
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for c in controllers {
        let run = run_baseline(&env, c, a.episodes, a.seed)?;
        rows.push(MetricsRow::new(c.label(), a.seed, &run.metrics));
        logs.extend(run.logs);
    }
    if let Some(path) = &a.event_log {
        output::write_events(path, &logs)?;
    }
    emit_metrics(&rows, a.out.as_deref(), stdout)
}

fn export<W: Write>(a: ExportArgs, stdout: &mut W) -> AppResult<()> {
    let ck = Checkpoint::open(&a.checkpoint)?;
    let (nets, params) = ck.policy()?;
    let train = &ck.config.train;
    let timing = a.message_timing.as_deref().map(parse_timing).transpose()?.unwrap_or(train.message_timing);
    let rows = export_messages(&nets, &params, &ck.env, a.episodes, timing, a.seed.unwrap_or(train.seed))?;
    output::write_messages(&a.out, &rows)?;
    say(stdout, format_args!("{} rows written to {}", rows.len(), a.out.display()))
}

fn gradcheck<W: Write>(a: GradcheckArgs, stdout: &mut W) -> AppResult<()> {
    let mut cfg = SuiteConfig { seed: a.seed, ..SuiteConfig::default() };
    if let Some(p) = a.points {
        cfg.points = p;
    }
    if let Some(t) = a.tolerance {
        cfg.tolerance = t;
    }
    let report = gradient_suite(&cfg)?;
    let mut failed = 0;
    for r in &report {
        let kind = match r.kind {
            CheckKind::Primitive => "primitive",
            CheckKind::Composite => "composite",
            CheckKind::Control => "control",
        };
        let verdict = match (r.kind, r.passed) {
            (CheckKind::Control, true) => "detected",
            (CheckKind::Control, false) => "MISSED",
            (_, true) => "ok",
            (_, false) => "FAIL",
        };
        if !r.passed {
            failed += 1;
        }
        say(stdout, format_args!("{kind:<9} {:<28} points {:>4}  max_rel_err {:.3e}  {verdict}", r.name, r.points, r.max_relative_error))?;
    }
    say(stdout, format_args!("{} checks, {failed} failed (tolerance {:e})", report.len(), cfg.tolerance))?;
    if failed > 0 {
        return Err(AppError::GradientCheck(failed));
    }
    Ok(())
}

/// Entry point shared by the binary: parses, runs, and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let mut stdout = io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
