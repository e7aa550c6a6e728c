use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conformal_policy::runner::{self, ExperimentConfig};

#[derive(Parser)]
#[command(name = "cpl", version, about = "Conformal policy experiments: verification, training, rollouts, sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file (must set `schema_version = 1`).
    #[arg(long)]
    config: PathBuf,
    /// Root seed; rollout seeds default to consecutive values from here.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Theorem-bound and eventually-safe checks; exits 1 on any failure.
    Verify(Common),
    /// Collect data, train the danger forecaster, write model.txt.
    TrainPredictor(Common),
    /// Rollouts at the configured q_safe for each configured method.
    Rollout(Common),
    /// Rollouts over q_safe_grid x methods x seeds.
    Sweep(Common),
    /// Sliding-window coverage from a traces.csv.
    Coverage(Common),
}

fn run(cli: Cli) -> conformal_policy::Result<bool> {
    let (name, common) = match &cli.command {
        Command::Verify(c) => ("verify", c),
        Command::TrainPredictor(c) => ("train-predictor", c),
        Command::Rollout(c) => ("rollout", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Coverage(c) => ("coverage", c),
    };
    let cfg = ExperimentConfig::load(&common.config)?;
    let (seed, out) = (common.seed, common.out.as_path());
    log::info!("{name}: scenario {} seed {seed} -> {}", cfg.scenario.as_str(), out.display());
    match cli.command {
        Command::Verify(_) => {
            let report = runner::run_verify(&cfg, seed, Some(out))?;
            let t = &report.theorem;
            println!(
                "theorem: {} ({} streams, {} windows, {} violations, min slack {:.4}, telescoping/step {:.2e})",
                verdict(t.passed),
                t.streams,
                t.windows_checked,
                t.violations,
                t.min_slack,
                t.max_telescoping_residual_per_step
            );
            for a in &report.audits {
                println!(
                    "audit {}: {} ({} rollouts, {} auditable, {} windows, {} violations)",
                    a.scenario,
                    verdict(a.passed),
                    a.rollouts,
                    a.auditable,
                    a.windows_checked,
                    a.violations
                );
            }
            Ok(report.passed)
        }
        Command::TrainPredictor(_) => {
            let s = runner::run_train_predictor(&cfg, seed, out)?;
            println!(
                "trained on {} samples ({} positives) from {} rollouts; holdout mse {:.5}; model {}",
                s.train_samples,
                s.positives,
                s.rollouts,
                s.holdout_mse,
                s.model_path.display()
            );
            Ok(true)
        }
        Command::Rollout(_) | Command::Sweep(_) => {
            let outcome = if name == "rollout" {
                runner::run_rollout(&cfg, seed, out)?
            } else {
                runner::run_sweep(&cfg, seed, out)?
            };
            for r in &outcome.rows {
                println!(
                    "{:<12} q_safe {:<5} n {:<4} duration {:>7.2} s  speed {:>7.3}  coverage {:.3}",
                    r.method, r.q_safe, r.n, r.duration_mean, r.speed_mean, r.coverage
                );
            }
            Ok(true)
        }
        Command::Coverage(_) => {
            let s = runner::run_coverage(&cfg, seed, out)?;
            println!(
                "coverage {:.4} over {} scored steps in {} episodes",
                s.overall_coverage, s.scored_steps, s.episodes
            );
            Ok(true)
        }
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
