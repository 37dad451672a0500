//! `ddmhe`: simulate, synthesize, estimate, sweep and report.
//!
//! Exit codes: 0 when every requested certificate passes, 2 when a run
//! completes but a certificate fails, 1 on errors.

use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use ddmhe::harness::{self, ExperimentConfig, RunReport, SWEEP_VALUES};
use ddmhe::{behavioral, Error, Result};

#[derive(Parser)]
#[command(name = "ddmhe", version, about = "Data-driven moving horizon estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured plant and write history.csv and online.csv.
    Simulate {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run the pole-placement synthesis on historical data.
    Synthesize {
        #[arg(short, long)]
        config: Option<PathBuf>,
        /// Trajectory CSV to use instead of simulating the configured plant.
        #[arg(short, long)]
        data: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run all enabled estimators and write logs, report and plots.
    Estimate {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Replay the scenario over several values of mu.
    Sweep {
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Comma-separated mu values.
        #[arg(long, value_delimiter = ',', default_values_t = SWEEP_VALUES.to_vec())]
        mu: Vec<f64>,
    },
    /// Re-check a run directory's report against its CSV logs.
    Report {
        run: PathBuf,
        /// Largest tolerated discrepancy between report and logs.
        #[arg(long, default_value_t = 1e-12)]
        tol: f64,
    },
    /// Print the default configuration as TOML.
    Config,
}

fn load(config: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match config {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn print_report(out: &mut dyn Write, r: &RunReport) -> io::Result<()> {
    writeln!(out, "run {} (seed {}), {} historical + {} online samples", r.name, r.seed, r.history_samples, r.online_samples)?;
    if let Some(rank) = r.stack_rank {
        writeln!(out, "  hankel stack rank {rank}")?;
    }
    if let Some(s) = &r.synthesis {
        match (s.rho0, s.mu0) {
            (Some(rho0), Some(mu0)) => writeln!(
                out,
                "  synthesis: rho0 = {rho0:.6}, mu0 = {mu0:.6}, radius {}, parameters certified: {}",
                s.radius.unwrap_or(f64::NAN),
                s.parameters_certified == Some(true)
            )?,
            _ => writeln!(out, "  synthesis failed: {}", s.status)?,
        }
    }
    writeln!(out, "  {:<10} {:>12} {:>12} {:>12} {:>10} {:>10}", "estimator", "rmse", "final rmse", "max error", "lyapunov", "rges")?;
    for e in &r.estimators {
        match &e.metrics {
            Some(m) => writeln!(
                out,
                "  {:<10} {:>12.4e} {:>12.4e} {:>12.4e} {:>10} {:>10}",
                e.name,
                m.rmse,
                m.final_rmse,
                m.max_error,
                e.lyapunov_pass_rate.map_or("-".into(), |p| format!("{:.2}%", 100.0 * p)),
                e.rges_pass_rate.map_or("-".into(), |p| format!("{:.2}%", 100.0 * p)),
            )?,
            None => writeln!(out, "  {:<10} failed: {}", e.name, e.status)?,
        }
    }
    writeln!(out, "  certificates: {}", if r.certificates_pass { "pass" } else { "FAIL" })
}

fn verdict(pass: bool) -> ExitCode {
    if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<ExitCode> {
    let code = match cli.command {
        Command::Config => {
            write!(out, "{}", ExperimentConfig::default().to_toml()?)?;
            ExitCode::SUCCESS
        }
        Command::Simulate { config, out: dir } => {
            let cfg = load(&config)?;
            cfg.validate()?;
            let data = harness::simulate_scenario(&cfg)?;
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            behavioral::save_trajectory_csv(&data.history.data, &dir.join("history.csv"))?;
            behavioral::save_trajectory_csv(&data.online.data, &dir.join("online.csv"))?;
            writeln!(out, "wrote {} historical and {} online samples to {}", cfg.data.history, cfg.data.online, dir.display())?;
            ExitCode::SUCCESS
        }
        Command::Synthesize { config, data, out: dir } => {
            let cfg = load(&config)?;
            let history = match data {
                Some(p) => behavioral::load_trajectory_csv(&p)?,
                None => harness::simulate_scenario(&cfg)?.history.data,
            };
            let s = harness::run_synthesis(&cfg, &history);
            for it in &s.trace {
                writeln!(
                    out,
                    "  r = {:<10.6} rho0 = {:<12.6e} mu0 = {:<12.6e} margin = {:.3e}",
                    it.radius, it.rho0, it.mu0, it.min_margin
                )?;
            }
            if let Some(dir) = dir {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("synthesis.toml"), s.to_toml()?)?;
            }
            match (s.rho0, s.mu0) {
                (Some(rho0), Some(mu0)) => {
                    writeln!(out, "certified rho0 = {rho0:.6}, mu0 = {mu0:.6}")?;
                    verdict(s.parameters_certified == Some(true))
                }
                _ => {
                    writeln!(out, "synthesis failed: {}", s.status)?;
                    ExitCode::from(2)
                }
            }
        }
        Command::Estimate { config, out: dir } => {
            let cfg = load(&config)?;
            let res = harness::run_to_dir(&cfg, &dir)?;
            print_report(out, &res.report)?;
            verdict(res.report.certificates_pass)
        }
        Command::Sweep { config, out: dir, mu } => {
            let cfg = load(&config)?;
            if mu.is_empty() || mu.iter().any(|m| m.is_nan() || *m <= 0.0) {
                return Err(Error::Config("mu values must be positive".into()));
            }
            let rep = harness::sweep_mu(&cfg, &mu, Some(&dir))?;
            writeln!(out, "{:>10} {:>14} {:>14}", "mu", "dd-mhe", "dd-kmhe")?;
            for e in &rep.entries {
                let fin = |n: &str| {
                    e.report
                        .estimator(n)
                        .and_then(|s| s.metrics.as_ref())
                        .map_or("failed".to_string(), |m| format!("{:.4e}", m.final_rmse))
                };
                writeln!(out, "{:>10.0e} {:>14} {:>14}", e.mu, fin(harness::MHE), fin(harness::KMHE))?;
            }
            verdict(rep.entries.iter().all(|e| e.report.certificates_pass))
        }
        Command::Report { run, tol } => {
            let (report, worst) = harness::verify_run_dir(&run)?;
            print_report(out, &report)?;
            writeln!(out, "  largest report/log discrepancy {worst:.3e}")?;
            if worst > tol {
                writeln!(out, "report disagrees with logs beyond {tol:e}")?;
                return Ok(ExitCode::FAILURE);
            }
            verdict(report.certificates_pass)
        }
    };
    Ok(code)
}

fn main() -> ExitCode {
    let started = Instant::now();
    let code = match run(Cli::parse(), &mut io::stdout().lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    };
    eprintln!("elapsed {:.2} s", started.elapsed().as_secs_f64());
    code
}

#[cfg(test)]
mod tests;
