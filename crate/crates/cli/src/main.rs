use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mccpo::harness::{ablate_frontier, load_report, noise_sweep, render_report, run_suite_with, ExperimentConfig, RunOptions};
use mccpo::train::verify_safety_gap;

#[derive(Parser)]
#[command(name = "mccpo", version, about = "Constrained tutoring-policy experiments")]
struct Cli {
    /// Worker threads (default: one per seed).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Added to every configured seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed_offset: u64,
    /// Output root, replacing the config's `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method and seed of a suite.
    Run { config: PathBuf },
    /// Re-aggregate a finished suite directory.
    Report { dir: PathBuf },
    /// Exhaustively check the safety-gap construction.
    VerifySafetyGap {
        #[arg(long = "R", default_value_t = 0.6)]
        r: f64,
        #[arg(long, default_value_t = 0.99)]
        gamma: f64,
    },
    /// MC-CPO with and without frontier mixing.
    AblateFrontier { config: PathBuf },
    /// One MC-CPO suite per observation-noise level.
    NoiseSweep { config: PathBuf },
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &PathBuf) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    let opts = RunOptions { jobs: cli.jobs, seed_offset: cli.seed_offset, out_dir: cli.out };
    match cli.command {
        Command::Run { config } => {
            let out = run_suite_with(&load(&config)?, &opts, None)?;
            print!("{}", render_report(&out.report));
            println!("wrote {}", out.dir.display());
        }
        Command::Report { dir } => print!("{}", render_report(&load_report(&dir)?)),
        Command::VerifySafetyGap { r, gamma } => {
            if !(r > 0.0 && r < 1.0) || !(gamma > 0.0 && gamma < 1.0) {
                bail!("need R and gamma in (0, 1)");
            }
            let g = verify_safety_gap(r, gamma)?;
            println!("R = {r}, gamma = {gamma}");
            println!("optimal feasible return: {}", g.max_feasible_return);
            println!("unconstrained return:    {}", g.unconstrained_return);
            println!("filtered return:         {:.1}", g.filtered_return);
            println!("verdict: {}", if g.gap_confirmed { "GAP-CONFIRMED" } else { "NO-GAP" });
            if !g.gap_confirmed {
                bail!("safety gap not reproduced");
            }
        }
        Command::AblateFrontier { config } => {
            let a = ablate_frontier(&load(&config)?, &opts, None)?;
            print!("{}", render_report(&a.report));
            println!("default return {:.4}, no-frontier return {:.4}, delta {:+.4}", a.default_return, a.ablated_return, a.delta);
        }
        Command::NoiseSweep { config } => {
            for p in noise_sweep(&load(&config)?, &opts, None)? {
                println!("sigma = {}", p.sigma);
                print!("{}", render_report(&p.report));
            }
        }
    }
    Ok(())
}
