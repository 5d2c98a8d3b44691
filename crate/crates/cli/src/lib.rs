//! Experiment runner for bilevel hyperparameter optimization.
//!
//! Exit codes: 0 success, 1 failed checks, 2 invalid configuration,
//! 3 numerical failure, 4 input or output error.

pub mod commands;
pub mod config;
pub mod error;
pub mod inputs;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::fpc::FpcArgs;
use crate::config::ExperimentConfig;
use crate::error::{exit, CliError, CliResult};
use crate::output::{Echo, Seeds, Sink};

#[derive(Debug, Parser)]
#[command(name = "bilevel", version, about = "Bilevel hyperparameter optimization experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; takes precedence over `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "BILEVEL_WORKERS")]
    pub workers: Option<usize>,
    /// Overrides the top-level `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a hyperparameter search and write its trace.
    Tune,
    /// Bias-variance decomposition of the hypergradient over a λ grid.
    Biasvar {
        /// Grid as start:stop:count; overrides `biasvar.grid`.
        #[arg(long)]
        grid: Option<String>,
        /// Overrides `biasvar.replicates`.
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Learn per-sample weights on corrupted data and score the cleaner.
    Clean,
    /// Compare sampled split-subset error with the finite-population formula.
    Fpc {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        gamma: f64,
        /// One or more subset sizes, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        u: Vec<usize>,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        d: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
    },
    /// Verify derivatives and hypergradient engines on the model zoo.
    Check {
        /// Random probes per derivative check.
        #[arg(long, default_value_t = 5)]
        trials: usize,
    },
}

fn load_config(global: &GlobalArgs) -> CliResult<ExperimentConfig> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("--config", "this command needs a config file"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    cfg.resolve();
    Ok(cfg)
}

fn out_dir(global: &GlobalArgs) -> PathBuf {
    global.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

/// `--out` picks the directory without changing the echoed config, so runs
/// written to different places stay byte-identical.
fn run_dir(global: &GlobalArgs, cfg: &ExperimentConfig) -> PathBuf {
    global.out.clone().unwrap_or_else(|| cfg.output.dir.clone())
}

fn plain_seeds(seed: u64) -> Seeds {
    Seeds {
        global: seed,
        derived: Default::default(),
    }
}

/// Runs one parsed command line.
pub fn execute(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.global.workers {
        if n == 0 {
            return Err(CliError::config("--workers", "must be at least 1"));
        }
        // a pool set up earlier in this process is kept
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Cmd::Tune => {
            let cfg = load_config(&cli.global)?;
            cfg.validate(config::Command::Tune)?;
            let mut sink = Sink::open(&run_dir(&cli.global, &cfg), "tune", Echo::config(&cfg), inputs::seeds(&cfg))?;
            sink.write("config.toml", cfg.to_toml().as_bytes())?;
            let result = commands::tune::tune(&cfg, &mut sink);
            let report = sink.close(result)?;
            println!(
                "final hyperparameters (effective, first {}): {:?}",
                report.final_hyper_effective.len().min(8),
                &report.final_hyper_effective[..report.final_hyper_effective.len().min(8)]
            );
            println!("final validation loss {:.6e}", report.final_val_loss);
            if let Some(t) = report.final_test_loss {
                println!("final test loss {t:.6e}");
            }
        }
        Cmd::Biasvar { grid, replicates } => {
            let mut cfg = load_config(&cli.global)?;
            let b = cfg.biasvar.get_or_insert_with(Default::default);
            if let Some(g) = grid {
                b.grid = g.clone();
            }
            if let Some(r) = replicates {
                b.replicates = *r;
            }
            cfg.resolve();
            cfg.validate(config::Command::BiasVar)?;
            let mut sink = Sink::open(&run_dir(&cli.global, &cfg), "biasvar", Echo::config(&cfg), inputs::seeds(&cfg))?;
            sink.write("config.toml", cfg.to_toml().as_bytes())?;
            let result = commands::biasvar::biasvar(&cfg, &mut sink);
            let points = sink.close(result)?;
            let worst = points.iter().fold(0.0_f64, |m, p| m.max(p.identity_residual));
            println!("{} grid points, max identity residual {worst:.3e}", points.len());
        }
        Cmd::Clean => {
            let cfg = load_config(&cli.global)?;
            cfg.validate(config::Command::Clean)?;
            let mut sink = Sink::open(&run_dir(&cli.global, &cfg), "clean", Echo::config(&cfg), inputs::seeds(&cfg))?;
            sink.write("config.toml", cfg.to_toml().as_bytes())?;
            let result = commands::clean::clean(&cfg, &mut sink);
            let r = sink.close(result)?;
            let show = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
            println!(
                "flagged {} of {} untrusted samples; F1 {}; test accuracy {} (baseline {})",
                r.flagged,
                r.untrusted,
                show(r.f1),
                show(r.test_accuracy),
                show(r.baseline_test_accuracy)
            );
        }
        Cmd::Fpc {
            n,
            gamma,
            u,
            samples,
            d,
            lambda,
        } => {
            let seed = cli.global.seed.unwrap_or(0);
            let args = FpcArgs {
                n: *n,
                gamma: *gamma,
                u: u.clone(),
                samples: *samples,
                seed,
                d: *d,
                lambda: *lambda,
            };
            let echo = format!(
                "n = {n}\ngamma = {gamma:?}\nu = {u:?}\nsamples = {samples}\nd = {d}\nlambda = {lambda:?}\nseed = {seed}\n"
            );
            let mut sink = Sink::open(&out_dir(&cli.global), "fpc", Echo::args(echo), plain_seeds(seed))?;
            let result = commands::fpc::fpc(&args, &mut sink);
            sink.close(result)?;
        }
        Cmd::Check { trials } => {
            let seed = cli.global.seed.unwrap_or(0);
            let targets = commands::check::default_targets(seed)?;
            let echo = format!("trials = {trials}\nseed = {seed}\n");
            let mut sink = Sink::open(&out_dir(&cli.global), "check", Echo::args(echo), plain_seeds(seed))?;
            let result = commands::check::check(&targets, *trials, seed, &mut sink);
            sink.close(result)?;
        }
    }
    Ok(())
}

/// Runs a command line and maps the outcome to a process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
