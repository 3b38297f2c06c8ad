//! `dynrd` command-line interface.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dynrd::localpoly::KernelKind;

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "dynrd",
    version,
    about = "Dynamic regression discontinuity estimation, simulation and testing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// TOML configuration file; flags take precedence.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed of the simulation design.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
    /// triangular, uniform or epanechnikov.
    #[arg(long, global = true, value_parser = parse_kernel)]
    kernel: Option<KernelKind>,
    /// Nearest neighbours used for variance estimation.
    #[arg(long, global = true)]
    jstar: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Main bandwidth; bypasses selection together with --b.
    #[arg(long, global = true)]
    h: Option<f64>,
    /// Pilot bandwidth; bypasses selection together with --h.
    #[arg(long, global = true)]
    b: Option<f64>,
    /// Untreated periods required before the focal referendum.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    tau_max: Option<usize>,
    /// Pre-periods estimated as placebos.
    #[arg(long, global = true)]
    kpre: Option<usize>,
    /// Worker threads; zero uses every core.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Long-format panel CSV.
    #[arg(long, value_name = "CSV")]
    input: Option<PathBuf>,
    #[arg(long, allow_negative_numbers = true)]
    cutoff: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Event-study table of cohort-aggregated effects.
    Estimate(InputArgs),
    /// Simulate a panel from the referendum design.
    Simulate {
        /// Number of units.
        #[arg(long)]
        n: Option<usize>,
        /// Number of periods.
        #[arg(long)]
        t_bar: Option<usize>,
    },
    /// Monte Carlo study of the estimator and the common-trends test.
    Mc {
        #[arg(long)]
        reps: Option<usize>,
        /// Units per replication.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Common-trends test on pre-period outcomes.
    TestCt {
        #[command(flatten)]
        input: InputArgs,
        /// Earlier pre-period lag.
        #[arg(long)]
        u: Option<usize>,
        /// Later pre-period lag.
        #[arg(long)]
        v: Option<usize>,
        /// Post-period horizon defining the two path groups.
        #[arg(long)]
        horizon: Option<usize>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Simulate { .. } => "simulate",
            Command::Mc { .. } => "mc",
            Command::TestCt { .. } => "test-ct",
        }
    }
}

fn parse_kernel(s: &str) -> Result<KernelKind, String> {
    s.parse().map_err(|e: dynrd::Error| e.to_string())
}

macro_rules! apply {
    ($over:ident, $flag:literal, $value:expr => $($target:expr),+) => {
        if let Some(v) = $value {
            $over.set($flag, &v);
            $($target = v.clone().into();)+
        }
    };
}

fn resolve(cli: &Cli) -> Result<(RunConfig, Overrides), CliError> {
    let c = &cli.common;
    let mut cfg = RunConfig::load(c.config.as_deref())?;
    let mut over = Overrides::default();
    apply!(over, "seed", c.seed => cfg.sim.seed);
    apply!(over, "out_dir", c.out_dir.clone() => cfg.out_dir);
    apply!(over, "kernel", c.kernel => cfg.estimation.kernel);
    apply!(over, "jstar", c.jstar => cfg.estimation.jstar);
    apply!(over, "alpha", c.alpha => cfg.estimation.alpha);
    apply!(over, "h", c.h => cfg.estimation.h);
    apply!(over, "b", c.b => cfg.estimation.b);
    apply!(over, "k", c.k => cfg.study.k);
    apply!(over, "tau_max", c.tau_max => cfg.study.tau_max);
    apply!(over, "kpre", c.kpre => cfg.study.k_pre);
    apply!(over, "workers", c.workers => cfg.workers);
    match &cli.command {
        Command::Estimate(input) => apply_input(&mut cfg, &mut over, input),
        Command::Simulate { n, t_bar } => {
            apply!(over, "n", *n => cfg.sim.n);
            apply!(over, "t_bar", *t_bar => cfg.sim.t_bar);
        }
        Command::Mc { reps, n } => {
            apply!(over, "reps", *reps => cfg.mc.reps);
            apply!(over, "n", *n => cfg.sim.n);
        }
        Command::TestCt { input, u, v, horizon } => {
            apply_input(&mut cfg, &mut over, input);
            apply!(over, "u", *u => cfg.pretest.u);
            apply!(over, "v", *v => cfg.pretest.v);
            apply!(over, "horizon", *horizon => cfg.pretest.horizon);
        }
    }
    cfg.validate()?;
    Ok((cfg, over))
}

fn apply_input(cfg: &mut RunConfig, over: &mut Overrides, input: &InputArgs) {
    apply!(over, "input", input.input.clone() => cfg.data.input);
    apply!(over, "cutoff", input.cutoff => cfg.data.cutoff);
}

fn run(cli: &Cli) -> Result<serde_json::Value, CliError> {
    let (cfg, over) = resolve(cli)?;
    if cfg.workers > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
        {
            log::warn!("worker pool already configured: {e}");
        }
    }
    let command = cli.command.name();
    match cli.command {
        Command::Estimate(_) => commands::estimate(command, &cfg, &over),
        Command::Simulate { .. } => commands::simulate_panel(command, &cfg, &over),
        Command::Mc { .. } => commands::monte_carlo_study(command, &cfg, &over),
        Command::TestCt { .. } => commands::test_ct(command, &cfg, &over),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&summary).expect("summary serialises")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
