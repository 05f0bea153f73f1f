//! Benchmark command-line harness.
//!
//! Exit codes: 0 on success, 1 on configuration errors (bad flags, bad or
//! unreadable config files), 2 on runtime failures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sfo::bench::{
    self, emit_plot_data, gradcheck_problem, measure_overhead, run_benchmark,
    write_overhead_report, BenchError, RunConfig,
};

#[derive(Parser)]
#[command(
    name = "bench",
    about = "Convergence and overhead benchmarks for the sum-of-functions optimizer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every optimizer in a TOML config and write traces + summary.
    Run {
        /// Benchmark description (TOML). Use `--print-default` to see one.
        config: Option<PathBuf>,
        /// Override the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for traces and the summary.
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
        /// Override the config's pass budget.
        #[arg(long)]
        passes: Option<f64>,
        /// Print the default desk-scale config and exit.
        #[arg(long)]
        print_default: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Measure optimizer-only wall time per pass across problem sizes and
    /// fit log-log scaling slopes.
    Overhead {
        /// Comma-separated parameter dimensions, e.g. 1000,10000,100000.
        #[arg(long, value_delimiter = ',', required = true)]
        m_list: Vec<usize>,
        /// Comma-separated subfunction counts, e.g. 10,20,40.
        #[arg(long, value_delimiter = ',', required = true)]
        n_list: Vec<usize>,
        /// Measured passes per repeat.
        #[arg(long, default_value_t = 2.0)]
        passes: f64,
        /// Timing repeats per cell (the median is reported).
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value = "overhead_out")]
        out: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Merge a directory of trace CSVs into one long-form table with
    /// best-hyperparameter marks.
    Plotdata {
        dir: PathBuf,
        #[arg(long, default_value = "plot_data.csv")]
        out: PathBuf,
    },
    /// Check the configured problem's gradients against finite differences.
    Gradcheck {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long)]
        quiet: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems are configuration errors; --help/--version are
            // ordinary successes.
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                BenchError::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn load_config(path: &PathBuf) -> Result<RunConfig, BenchError> {
    if !path.exists() {
        return Err(BenchError::Config(format!(
            "config file not found: {}",
            path.display()
        )));
    }
    RunConfig::from_path(path)
}

fn dispatch(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            passes,
            print_default,
            quiet,
        } => {
            if print_default {
                print!("{}", RunConfig::default_benchmark().to_toml_string());
                return Ok(());
            }
            let mut config = match config {
                Some(path) => load_config(&path)?,
                None => RunConfig::default_benchmark(),
            };
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(passes) = passes {
                config.passes = passes;
            }
            config.validate()?;
            let summary = run_benchmark(&config, &out)?;
            if !quiet {
                if let Some(f_star) = summary.f_star {
                    println!("f_star = {f_star:.12e} ({})", summary.f_star_source);
                }
                for run in &summary.runs {
                    match (&run.failed, run.final_objective) {
                        (Some(reason), _) => println!("{:<40} FAILED: {reason}", run.run_id),
                        (None, Some(f)) => println!("{:<40} final F = {f:.12e}", run.run_id),
                        (None, None) => println!("{:<40} (empty)", run.run_id),
                    }
                }
                for (method, best) in &summary.best_per_method {
                    println!("best {method}: {} ({})", best.hyperparams, best.run_id);
                }
                println!("traces written to {}", out.display());
            }
            Ok(())
        }
        Command::Overhead {
            m_list,
            n_list,
            passes,
            repeats,
            out,
            quiet,
        } => {
            let report = measure_overhead(&m_list, &n_list, passes, repeats)?;
            write_overhead_report(&report, &out)?;
            if !quiet {
                for cell in &report.cells {
                    println!(
                        "M = {:>8}  N = {:>4}  overhead {:.6} s/pass{}",
                        cell.m,
                        cell.n,
                        cell.overhead_seconds_per_pass,
                        if cell.unreliable { "  (noisy)" } else { "" }
                    );
                }
                for fit in &report.fits {
                    match fit.slope {
                        Some(s) => println!(
                            "slope in {} at fixed {} = {s:.3} ({} points)",
                            fit.axis, fit.fixed, fit.points
                        ),
                        None => println!(
                            "slope in {} at fixed {}: not applicable (single point)",
                            fit.axis, fit.fixed
                        ),
                    }
                }
                println!("report written to {}", out.display());
            }
            Ok(())
        }
        Command::Plotdata { dir, out } => {
            let rows = emit_plot_data(&dir, &out)?;
            println!("merged {rows} rows into {}", out.display());
            Ok(())
        }
        Command::Gradcheck {
            config,
            seed,
            trials,
            quiet,
        } => {
            let config = load_config(&config)?;
            let worst = gradcheck_problem(&config.problem, seed.unwrap_or(config.seed), trials)?;
            if !quiet {
                println!("max relative gradient error over {trials} random points: {worst:.3e}");
            }
            if worst <= 1e-5 {
                Ok(())
            } else {
                Err(bench::BenchError::Problem(
                    sfo::problem::ProblemError::InvalidConfig(format!(
                        "gradient check failed: worst relative error {worst:.3e} > 1e-5"
                    )),
                ))
            }
        }
    }
}
