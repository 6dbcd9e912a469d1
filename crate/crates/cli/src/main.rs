//! `proxybnn`: data generation, training, evaluation, bounds and studies
//! for Bayesian proxies of constrained optimization problems.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use proxybnn::sandwich::Mode;

use crate::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "proxybnn", version, about = "Bayesian optimization proxies with confidence bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand)]
enum Command {
    /// Write labeled, unlabeled and test JSONL files.
    GenData,
    /// Train and write a checkpoint with its run report.
    Train,
    /// Metrics of the mean and SvP predictions on the test set.
    Eval,
    /// Per-variable error bounds on the test set.
    Bounds,
    /// Convergence sweeps over M and H plus the variance hypothesis table.
    MetaStudy,
    /// Print the resolved configuration as TOML.
    ShowConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Supervised,
    Sandwich,
    DnnBaseline,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Supervised => Mode::Supervised,
            ModeArg::Sandwich => Mode::Sandwich,
            ModeArg::DnnBaseline => Mode::DnnBaseline,
        }
    }
}

#[derive(Args)]
struct Flags {
    /// TOML run configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Total wall-clock budget in seconds.
    #[arg(long, global = true, conflicts_with = "budget_steps")]
    budget_secs: Option<f64>,
    /// Total budget in optimizer steps; makes training bit-reproducible.
    #[arg(long, global = true)]
    budget_steps: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// ACOPF case file; selects the ACOPF problem.
    #[arg(long, global = true)]
    case: Option<PathBuf>,
    #[arg(long, global = true)]
    labeled: Option<PathBuf>,
    #[arg(long, global = true)]
    unlabeled: Option<PathBuf>,
    #[arg(long, global = true)]
    test: Option<PathBuf>,
    /// Posterior samples H per input.
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    confidence: Option<f64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
}

impl Flags {
    fn overrides(&self) -> Overrides {
        Overrides {
            mode: self.mode.map(Mode::from),
            seed: self.seed,
            budget_secs: self.budget_secs,
            budget_steps: self.budget_steps,
            out: self.out.clone(),
            case: self.case.clone(),
            labeled: self.labeled.clone(),
            unlabeled: self.unlabeled.clone(),
            test: self.test.clone(),
            samples: self.samples,
            confidence: self.confidence,
            trials: self.trials,
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PROXYBNN_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("PROXYBNN_THREADS = {v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let mut config = RunConfig::load(cli.flags.config.as_deref())?;
    config.apply(cli.flags.overrides());
    config.train.validate()?;
    match cli.command {
        Command::GenData => {
            for path in commands::gen_data(&config)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train => {
            let s = commands::cmd_train(&config)?;
            println!("checkpoint {} sha256 {} steps {}", s.checkpoint.display(), s.checkpoint_sha256, s.steps);
        }
        Command::Eval => {
            println!("{}", commands::METRICS_HEADER.join(","));
            for r in commands::cmd_eval(&config)? {
                let v = r.table.values();
                println!("{},{},{},{},{},{}", r.method, v[0], v[1], v[2], v[3], v[4]);
            }
        }
        Command::Bounds => {
            let report = commands::cmd_bounds(&config)?;
            println!("variable_id,mean_abs_err,eps_hoeffding,eps_emp_bernstein,eps_bernstein_mpv");
            for r in &report.rows {
                println!(
                    "{},{},{},{},{}",
                    r.variable_id, r.mean_abs_err, r.eps_hoeffding, r.eps_emp_bernstein, r.eps_bernstein_mpv
                );
            }
        }
        Command::MetaStudy => {
            let s = commands::cmd_meta_study(&config)?;
            println!("{} convergence rows", s.convergence.len());
            for (alpha, f) in s.fractions {
                println!("alpha {alpha}: hypothesis holds for {:.1}% of variables", 100.0 * f);
            }
        }
        Command::ShowConfig => print!("{}", toml::to_string(&config)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
