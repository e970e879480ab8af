//! Experiment harness: runs named experiments end-to-end and persists
//! plot-ready results.
//!
//! Exit codes: 0 success, 2 configuration error, 3 estimator refusal,
//! 4 invariant violation.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use sinai_core::experiment::{
    kl_refinement_rows, resolve_out_dir, run_experiment, run_oracle, write_bound_reports,
    write_entropy_curve, write_entropy_report, write_kse_summary, write_lyapunov,
    write_work_report, Experiment, ExperimentConfig, WorkReportFile,
};
use sinai_core::thermo::{jarzynski_check, second_law_ok};
use sinai_core::Error;

#[derive(Parser)]
#[command(
    name = "sinai",
    about = "Hamiltonian maps, phase-space coarse-graining, Kolmogorov-Sinai entropy, and dissipation bounds",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (TOML key-value or JSON)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: runs/<subcommand>)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: sample, evolve, symbolize, estimate, bound, persist
    Run,
    /// Block entropies and the Kolmogorov-Sinai estimate only
    Kse,
    /// Lyapunov spectrum with convergence trace
    Lyapunov,
    /// Work statistics, Jarzynski check, relative-entropy estimates
    Work,
    /// Dissipation bound reports for every configured partition
    Bound,
    /// Exact discrete-system property sweep; nonzero exit on any violation
    Oracle {
        /// number of random instances
        #[arg(long, default_value_t = 1000)]
        instances: usize,
    },
}

fn load_experiment(cli: &Cli) -> Result<Experiment, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config PATH is required for this subcommand"))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Experiment::new(config)
}

fn dispatch(cli: &Cli) -> Result<(), Error> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Run => {
            let exp = load_experiment(cli)?;
            let out = resolve_out_dir(cli.out.clone(), "run");
            let summary = run_experiment(&exp, &out)?;
            println!(
                "run complete: config {} kse_h {:?} slack {:?} -> {}",
                &summary.config_hash[..12],
                summary.kse_h,
                summary.bound_slack,
                out.display()
            );
            Ok(())
        }
        Command::Kse => {
            let exp = load_experiment(cli)?;
            let out = resolve_out_dir(cli.out.clone(), "kse");
            let ensemble = exp.sample_ensemble()?;
            let analyses = exp.analyze_partitions(&ensemble)?;
            write_entropy_report(&out.join("entropy_report.csv"), &analyses)?;
            write_entropy_curve(&out.join("entropy_curve.csv"), &analyses)?;
            let kse = exp.kse(&analyses)?;
            write_kse_summary(&out.join("kse_summary.json"), &kse, &exp.config_hash)?;
            println!(
                "kse: h = {:.6} (partition {}) -> {}",
                kse.h,
                kse.maximizing_partition,
                out.display()
            );
            Ok(())
        }
        Command::Lyapunov => {
            let exp = load_experiment(cli)?;
            let out = resolve_out_dir(cli.out.clone(), "lyapunov");
            let report = exp.lyapunov()?;
            write_lyapunov(&out, &report, &exp.config_hash)?;
            println!(
                "lyapunov: exponents {:?} -> {}",
                report.exponents,
                out.display()
            );
            Ok(())
        }
        Command::Work => {
            let exp = load_experiment(cli)?;
            let out = resolve_out_dir(cli.out.clone(), "work");
            let ensemble = exp.sample_ensemble()?;
            let record = exp.work(&ensemble)?;
            if !second_law_ok(&record) {
                return Err(Error::invariant(format!(
                    "<W_d> = {} violates the second law at 3 sigma",
                    record.wd_mean
                )));
            }
            let jarzynski = if record.beta > 0.0 {
                Some(jarzynski_check(&record, 200, exp.config.seed ^ 0x7a)?)
            } else {
                None
            };
            let kl = if exp.config.is_driven() {
                kl_refinement_rows(&exp, &ensemble)?
            } else {
                Vec::new()
            };
            write_work_report(
                &out,
                &WorkReportFile {
                    beta: record.beta,
                    w_mean: record.w_mean,
                    w_std_err: record.w_std_err,
                    delta_f: record.delta_f,
                    wd_mean: record.wd_mean,
                    wd_std_err: record.wd_std_err,
                    jarzynski,
                    relative_entropy: kl,
                    config_hash: exp.config_hash.clone(),
                },
            )?;
            println!(
                "work: <W> = {:.6} dF = {:.6} <W_d> = {:.6} -> {}",
                record.w_mean,
                record.delta_f,
                record.wd_mean,
                out.display()
            );
            Ok(())
        }
        Command::Bound => {
            let exp = load_experiment(cli)?;
            let out = resolve_out_dir(cli.out.clone(), "bound");
            let ensemble = exp.sample_ensemble()?;
            let analyses = exp.analyze_partitions(&ensemble)?;
            let kse = exp.kse(&analyses).ok();
            let reports = exp.bound_reports(&ensemble, &analyses, kse.map(|k| k.h))?;
            write_bound_reports(&out, &reports)?;
            for r in &reports {
                println!(
                    "bound[{}]: lhs {:.6} rhs {:.6} slack {:.6} +- {:.6}",
                    r.partition_id, r.lhs, r.rhs, r.slack, r.errors.slack
                );
            }
            println!("-> {}", out.display());
            Ok(())
        }
        Command::Oracle { instances } => {
            let out = cli.out.clone();
            let summary = run_oracle(*instances, cli.seed.unwrap_or(424_242), out.as_deref())?;
            println!(
                "oracle: {} instances, min slack {:.3e}, lemma margin {:.3e}",
                summary.instances, summary.min_slack, summary.lemma_margin
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::EstimatorRefused(_) => 3,
                Error::InvariantViolation(_) => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
