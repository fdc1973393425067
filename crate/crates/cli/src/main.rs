use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sffn_cli::analyze::{cmd_analyze, load_trace, AnalyzeRequest};
use sffn_cli::config::{split_overrides, ExperimentConfig, SCHEMA};
use sffn_cli::io::write_json;
use sffn_cli::run::{cmd_eval, cmd_train, CHECKPOINT_FILE};
use sffn_cli::verify::{run_suite, Suite};
use sffn_cli::{thread_cap, version_string};

/// Sparse feed-forward experiments: training, verification and routing analysis.
///
/// Any `--a.b=value` argument overrides the config key `a.b`, e.g.
/// `--model.d=64` or `--model.selector.kind=avgk`.
#[derive(Parser)]
#[command(name = "sffn", version = version_string())]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoint.sffn, trace.csv and manifest.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the held-out split; writes eval.json.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to checkpoint.sffn in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a verification suite; exits nonzero if any check fails.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for verify-<suite>.json; the report goes to stdout otherwise.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// FLOPs, overlap and load-balance analytics; writes analysis.csv and report.json.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Routing trace written by `train` or `eval`.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Token budget for FLOPs totals.
        #[arg(long)]
        tokens: Option<f64>,
        /// Position pairs sampled per sequence for the overlap estimate.
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
    },
    /// Print the config JSON schema.
    Schema,
}

fn load_config(path: &PathBuf, seed: Option<u64>, out: Option<PathBuf>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path, overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = o;
    }
    Ok(cfg)
}

fn run(cli: Cli, overrides: &[String]) -> Result<bool> {
    let threads = thread_cap()?;
    if !overrides.is_empty() && !matches!(cli.command, Command::Train { .. } | Command::Eval { .. } | Command::Analyze { .. }) {
        anyhow::bail!("config overrides {overrides:?} given to a command without a config");
    }
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed, out, overrides)?;
            let outcome = cmd_train(&cfg, threads)?;
            println!(
                "trained {} steps; final val ppl {}; outputs in {}",
                outcome.manifest.steps_completed,
                outcome.manifest.final_val_ppl.map_or("n/a".into(), |p| format!("{p:.4}")),
                outcome.out_dir.display()
            );
            Ok(true)
        }
        Command::Eval {
            config,
            seed,
            out,
            checkpoint,
        } => {
            let cfg = load_config(&config, seed, out, overrides)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_FILE));
            let r = cmd_eval(&cfg, &ckpt)?;
            println!("val loss {:.6}, val ppl {:.4} over {} tokens", r.val_loss, r.val_ppl, r.val_tokens);
            Ok(true)
        }
        Command::Verify { suite, seed, out } => {
            let report = run_suite(suite, seed)?;
            for c in &report.checks {
                eprintln!("{}", c.line());
            }
            match out {
                Some(dir) => write_json(&dir.join(format!("verify-{}.json", suite.name())), &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
            eprintln!("{} {}", if report.passed { "PASSED" } else { "FAILED" }, suite.name());
            Ok(report.passed)
        }
        Command::Analyze {
            config,
            trace,
            seed,
            out,
            tokens,
            pairs,
        } => {
            let cfg = config.as_ref().map(|p| load_config(p, seed, out.clone(), overrides)).transpose()?;
            let trace = trace.as_deref().map(load_trace).transpose()?;
            let out_dir = out
                .or_else(|| cfg.as_ref().map(|c| c.out_dir.clone()))
                .context("analyze needs --out when no config is given")?;
            let req = AnalyzeRequest {
                config: cfg.as_ref(),
                trace: trace.as_ref(),
                tokens,
                pairs_per_sequence: pairs,
                seed: seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0),
            };
            cmd_analyze(&req, &out_dir)?;
            println!("analysis written to {}", out_dir.display());
            Ok(true)
        }
        Command::Schema => {
            print!("{SCHEMA}");
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
