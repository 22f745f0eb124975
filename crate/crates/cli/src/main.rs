use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use ebt_core::flops::flop_report;
use ebt_core::harness::{run_eval, run_sweep, run_train, AnyModel, RunConfig, SweepAxis};
use ebt_core::EbtError;

#[derive(Parser)]
#[command(name = "ebt", version, about = "Train and evaluate energy-based transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunFlags {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training steps; overrides `train.total_steps`.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Args)]
struct EvalFlags {
    /// Run configuration whose output directory holds the checkpoint.
    #[arg(long, required_unless_present = "checkpoint")]
    config: Option<PathBuf>,
    /// Checkpoint file; defaults to `<out_dir>/model.ckpt` from `--config`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Where to write reports; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Thinking steps per prediction.
    #[arg(long)]
    steps: Option<usize>,
    /// Best-of-N candidates per prediction.
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, validation.csv and model.ckpt.
    Train(RunFlags),
    /// Evaluate a checkpoint with thinking against its training-step baseline.
    Eval(EvalFlags),
    /// Train one run per grid point and fit a log-log slope.
    Sweep {
        #[command(flatten)]
        run: RunFlags,
        /// width | depth | data | steps
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        grid: Vec<usize>,
    },
    /// Print per-token FLOP estimates.
    Flops {
        /// Non-embedding parameter count; taken from `--config` if absent.
        #[arg(long)]
        params: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Optimization steps per prediction.
        #[arg(long, default_value_t = 2)]
        steps: u64,
        /// Tokens to total over.
        #[arg(long, default_value_t = 1)]
        tokens: u64,
    },
    /// Export the energy trace of the first evaluation batch as JSON.
    TraceExport(EvalFlags),
}

fn precision_bits(p: &Option<String>) -> Option<u32> {
    p.as_deref().map(|s| s.parse().expect("validated by clap"))
}

fn load_run(flags: &RunFlags) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&flags.config)?;
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(o) = &flags.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = flags.steps {
        cfg.train.total_steps = n;
        cfg.train.warmup_steps = cfg.train.warmup_steps.min(n);
    }
    if let Some(p) = precision_bits(&flags.precision) {
        cfg.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_of(flags: &EvalFlags) -> Result<PathBuf> {
    match (&flags.checkpoint, &flags.config) {
        (Some(c), _) => Ok(c.clone()),
        (None, Some(cfg)) => Ok(RunConfig::load(cfg)?.checkpoint_path()),
        (None, None) => bail!(EbtError::config("need --checkpoint or --config")),
    }
}

fn out_dir(flags: &EvalFlags, ckpt: &Path) -> Result<PathBuf> {
    let dir = flags
        .out
        .clone()
        .unwrap_or_else(|| ckpt.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(flags) => {
            let cfg = load_run(&flags)?;
            let out = run_train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Eval(flags) => {
            let ckpt = checkpoint_of(&flags)?;
            let dir = out_dir(&flags, &ckpt)?;
            let trace = dir.join("trace.json");
            let report = run_eval(&ckpt, flags.steps, flags.candidates, precision_bits(&flags.precision), Some(&trace))?;
            let text = serde_json::to_string_pretty(&report)?;
            std::fs::write(dir.join("eval.json"), &text)?;
            println!("{text}");
        }
        Command::TraceExport(flags) => {
            let ckpt = checkpoint_of(&flags)?;
            let dir = out_dir(&flags, &ckpt)?;
            let trace = dir.join("trace.json");
            run_eval(&ckpt, flags.steps, flags.candidates, precision_bits(&flags.precision), Some(&trace))?;
            println!("{}", trace.display());
        }
        Command::Sweep { run, axis, grid } => {
            let cfg = load_run(&run)?;
            let axis: SweepAxis = axis.parse()?;
            let report = run_sweep(&cfg, axis, &grid)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.partial {
                eprintln!("warning: some sweep points failed; the fit uses the rest");
            }
        }
        Command::Flops { params, config, steps, tokens } => {
            let n = match (params, config) {
                (Some(n), _) => n,
                (None, Some(path)) => {
                    let cfg = RunConfig::load(&path)?;
                    AnyModel::build(&cfg.model, 0)?.non_embedding_params() as u64
                }
                (None, None) => bail!(EbtError::config("need --params or --config")),
            };
            println!("{}", serde_json::to_string_pretty(&flop_report(n, steps, tokens)?)?);
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<EbtError>() {
        Some(EbtError::Config(_)) => 2,
        Some(e) if e.is_instability() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
