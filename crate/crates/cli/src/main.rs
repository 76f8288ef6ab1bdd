//! `corrflow`: generate demonstrations, fit statistics, train, roll out,
//! evaluate and plot.

mod config;
mod report;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use corrflow::checkpoint::Checkpoint;
use corrflow::dataset::EpisodeDataset;
use corrflow::inference::Engine;
use corrflow::policy::{report_summary, DatasetStats, Policy};
use corrflow::stage::write_events;
use corrflow::world::{eval_params, evaluate, generate_demos, rollout, EpisodeConfig, ScriptedAgent, WorldSpec};
use corrflow::{Error, Result};

use config::{parse_tasks, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "corrflow", version, about = "Correlated-noise flow policies on a planar staged-task world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Key-value configuration file applied over the built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed [default: 0]
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated task ids [default: 0,1,2,3]
    #[arg(long, global = true)]
    tasks: Option<String>,
    /// Episodes per task: demonstrations for `generate` [default: 200], evaluation episodes for `eval` [default: 20]
    #[arg(long, global = true)]
    episodes: Option<usize>,
    /// Parent directory for run directories [default: runs]
    #[arg(long, global = true, default_value = "runs", hide_default_value = true)]
    out: PathBuf,
    /// Chunk horizon H [default: 30]
    #[arg(long, global = true)]
    horizon: Option<usize>,
    /// Action dimension D; must match the world [default: 5]
    #[arg(long, global = true)]
    action_dim: Option<usize>,
    /// Covariance shrinkage toward the identity [default: 0.5]
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Flow samples per training example [default: 15]
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Euler denoising steps [default: 10]
    #[arg(long, global = true)]
    denoise_steps: Option<usize>,
    /// Rows executed per chunk [default: 26]
    #[arg(long, global = true)]
    execute_count: Option<usize>,
    /// Unexecuted rows carried into the next chunk [default: 4]
    #[arg(long, global = true)]
    save_tail: Option<usize>,
    /// Inpainting applies while flow time exceeds this [default: 0.3]
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Execution speedup from spline compression [default: 1.3]
    #[arg(long, global = true)]
    speedup: Option<f64>,
    /// Any configuration key, as KEY=VALUE (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write scripted demonstrations to <run>/dataset
    Generate(GenerateArgs),
    /// Fit normalization, covariance and gripper statistics
    Fit(FitArgs),
    /// Train the velocity network and stage head
    Train(TrainArgs),
    /// Run one episode and write per-cycle traces
    Rollout(RolloutArgs),
    /// Score a policy (or the scripted demonstrator) on every task
    Eval(EvalArgs),
    /// Render results and stage traces as SVG and CSV
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Statistics checkpoint from `fit`
    #[arg(long)]
    stats: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct RolloutArgs {
    /// Policy checkpoint from `train`
    #[arg(long)]
    policy: PathBuf,
    /// Task id [default: 0]
    #[arg(long, default_value_t = 0, hide_default_value = true)]
    task: usize,
    /// Evaluation episode index [default: 0]
    #[arg(long, default_value_t = 0, hide_default_value = true)]
    episode: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Policy checkpoint from `train`
    #[arg(long, required_unless_present = "scripted", conflicts_with = "scripted")]
    policy: Option<PathBuf>,
    /// Evaluate the scripted demonstrator instead of a policy
    #[arg(long)]
    scripted: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// results.json from `eval`
    #[arg(long)]
    results: PathBuf,
    /// stage_events.jsonl from `rollout`
    #[arg(long)]
    events: Option<PathBuf>,
    /// loss.csv from `train`
    #[arg(long)]
    loss: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parameter(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Format(_) | Error::Json(_) | Error::Layout(_) => 4,
        Error::Divergence { .. } => 5,
        Error::Numerical { .. } | Error::Factorization { .. } => 6,
        _ => 1,
    }
}

fn fail(kind: &str, message: &str, code: u8) -> ExitCode {
    let body = json!({ "error": kind, "message": message, "exit_code": code });
    let _ = writeln!(std::io::stderr(), "{body}");
    ExitCode::from(code)
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &common.config {
        cfg.apply_file(p)?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(t) = &common.tasks {
        cfg.tasks = parse_tasks(t)?;
    }
    let flags: [(&str, Option<String>); 9] = [
        ("horizon", common.horizon.map(|v| v.to_string())),
        ("action_dim", common.action_dim.map(|v| v.to_string())),
        ("beta", common.beta.map(|v| v.to_string())),
        ("samples", common.samples.map(|v| v.to_string())),
        ("denoise_steps", common.denoise_steps.map(|v| v.to_string())),
        ("execute_count", common.execute_count.map(|v| v.to_string())),
        ("save_tail", common.save_tail.map(|v| v.to_string())),
        ("threshold", common.threshold.map(|v| v.to_string())),
        ("speedup", common.speedup.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for o in &common.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {o:?}")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `<out>/<UTC timestamp>-seed<seed>[-n]` and snapshots the config
/// into it.
fn run_dir(common: &Common, cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(&common.out)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-seed{}", cfg.seed);
    let mut dir = common.out.join(&base);
    let mut n = 1;
    while dir.exists() {
        dir = common.out.join(format!("{base}-{n}"));
        n += 1;
    }
    std::fs::create_dir_all(&dir)?;
    let snapshot = format!("# corrflow {command}\n{}", cfg.to_text());
    std::fs::write(dir.join("config.resolved"), snapshot)?;
    Ok(dir)
}

fn threads() -> usize {
    let avail = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("CORRFLOW_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => n.min(avail.max(1)).max(1),
        _ => avail,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn load_policy(path: &Path, spec: &WorldSpec) -> Result<Policy> {
    let p = Policy::from_checkpoint(&Checkpoint::load(path)?)?;
    p.check_world(spec)?;
    Ok(p)
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(n) = args.common.episodes {
        cfg.demo_episodes = n;
    }
    let spec = WorldSpec::standard();
    let n = cfg.demo_episodes * cfg.tasks.len();
    let ds = generate_demos(&spec, &cfg.tasks, n, corrflow::rng::derive_seed(cfg.seed, "demos"))?;
    let dir = run_dir(&args.common, &cfg, "generate")?;
    ds.save(&dir.join("dataset"))?;
    println!("{}", dir.join("dataset").display());
    log::info!("{} episodes, {} steps, fingerprint {:016x}", ds.episodes.len(), ds.total_steps(), ds.fingerprint());
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let ds = EpisodeDataset::load(&args.data)?;
    let stats = DatasetStats::fit(&ds, cfg.horizon)?;
    let dir = run_dir(&args.common, &cfg, "fit")?;
    stats.to_checkpoint().save(&dir.join("stats.ckpt"))?;
    println!("{}", dir.join("stats.ckpt").display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let ds = EpisodeDataset::load(&args.data)?;
    let stats = DatasetStats::from_checkpoint(&Checkpoint::load(&args.stats)?)?;
    let dir = run_dir(&args.common, &cfg, "train")?;
    let every = (cfg.train_steps / 20).max(1);
    let (policy, report) = Policy::train(stats, &ds, cfg.policy_config(), corrflow::rng::derive_seed(cfg.seed, "policy"), |s, _, l| {
        if s % every == 0 {
            log::info!("step {s} loss {l:.5}");
        }
        Ok(())
    })?;
    policy.to_checkpoint().save(&dir.join("policy.ckpt"))?;
    let mut csv = String::from("step,action_loss\n");
    for (i, l) in report.action_loss.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(dir.join("loss.csv"), csv)?;
    write_json(&dir.join("train.json"), &report_summary(&report))?;
    println!("{}", dir.join("policy.ckpt").display());
    Ok(())
}

fn cmd_rollout(args: RolloutArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let spec = WorldSpec::standard();
    let policy = load_policy(&args.policy, &spec)?;
    let mut engine = Engine::new(&policy, cfg.engine_config())?;
    let ep = EpisodeConfig { task: args.task, params: eval_params(cfg.seed, args.task, args.episode), time_limit: None };
    let mut outcome = rollout(&mut engine, &spec, &ep)?;
    outcome.episode = args.episode;
    let dir = run_dir(&args.common, &cfg, "rollout")?;
    let mut trace = Vec::new();
    for t in engine.traces() {
        serde_json::to_writer(&mut trace, t)?;
        trace.push(b'\n');
    }
    std::fs::write(dir.join("trace.jsonl"), trace)?;
    let mut events = Vec::new();
    let mut evs = engine.take_events();
    evs.iter_mut().for_each(|e| e.episode = args.episode);
    write_events(&mut events, &evs)?;
    std::fs::write(dir.join("stage_events.jsonl"), events)?;
    write_json(&dir.join("outcome.json"), &outcome)?;
    println!("q {:.3}", outcome.report.q);
    println!("{}", dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = resolve(&args.common)?;
    if let Some(n) = args.common.episodes {
        cfg.eval_episodes = n;
    }
    let spec = WorldSpec::standard();
    let workers = threads();
    let report = if args.scripted {
        evaluate(|| Ok(ScriptedAgent::new(spec.clone())), &spec, &cfg.tasks, cfg.eval_episodes, cfg.seed, workers)?
    } else {
        let path = args.policy.as_ref().expect("clap enforces --policy without --scripted");
        let policy = load_policy(path, &spec)?;
        let engine_cfg = cfg.engine_config();
        evaluate(|| Engine::new(&policy, engine_cfg.clone()), &spec, &cfg.tasks, cfg.eval_episodes, cfg.seed, workers)?
    };
    let dir = run_dir(&args.common, &cfg, "eval")?;
    write_json(&dir.join("results.json"), &report)?;
    for t in &report.tasks {
        println!("task {} {:<18} q {:.3} success {:.3}", t.task, t.name, t.q, t.success_rate);
    }
    println!("q_score {:.3}", report.q_score);
    println!("{}", dir.join("results.json").display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let cfg = resolve(&args.common)?;
    let dir = run_dir(&args.common, &cfg, "report")?;
    let written = report::render(&args.results, args.events.as_deref(), args.loss.as_deref(), &dir)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            return fail("usage", e.to_string().trim(), 2);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Train(a) => cmd_train(a),
        Command::Rollout(a) => cmd_rollout(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string(), exit_code(&e)),
    }
}

