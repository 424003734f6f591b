//! `cvsparse` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cvsparse::experiment::config::RawConfig;
use cvsparse::experiment::{report, run_experiment, ExperimentConfig, RunOptions};
use cvsparse::varlayers::PenaltyKind;
use cvsparse::verify::{gradcheck_sweep, verify_kl, verify_lrt, KlConfig, LrtConfig};

#[derive(Parser)]
#[command(
    name = "cvsparse",
    version,
    about = "Sparse complex-valued networks: training and numeric checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum LrtPenalty {
    Cvd,
    Card,
    Rscale,
}

impl From<LrtPenalty> for PenaltyKind {
    fn from(p: LrtPenalty) -> Self {
        match p {
            LrtPenalty::Cvd => PenaltyKind::Cvd,
            LrtPenalty::Card => PenaltyKind::Card,
            LrtPenalty::Rscale => PenaltyKind::Rscale,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run pretrain, sparsify and fine-tune for every replication and C.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Runs a single replication with this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Divides every stage length (desk runs).
        #[arg(long)]
        scale: Option<usize>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Monte-Carlo check of the divergence approximations and derivatives.
    VerifyKl {
        #[arg(long, default_value_t = 1024)]
        grid: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for `kl_report.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Local reparameterization versus explicit weight sampling.
    VerifyLrt {
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "cvd")]
        penalty: LrtPenalty,
        /// Set every variance to zero.
        #[arg(long)]
        zero_variance: bool,
    },
    /// Finite-difference check of every layer/penalty pair.
    Gradcheck,
    /// Trade-off table from the metrics CSVs in a directory.
    Report {
        dir: PathBuf,
        /// Also write `report.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    })
}

fn train(
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    scale: Option<usize>,
    resume: bool,
) -> Result<bool> {
    let mut raw =
        RawConfig::load(config).with_context(|| format!("loading {}", config.display()))?;
    if let Some(out) = out {
        raw.set("output.dir", &absolute(out)?.to_string_lossy())?;
    }
    if let Some(seed) = seed {
        raw.set("experiment.replications", &seed.to_string())?;
    }
    if let Some(scale) = scale {
        raw.set("experiment.scale", &scale.to_string())?;
    }
    let cfg = ExperimentConfig::from_raw(&raw)?;
    let summary = run_experiment(
        &cfg,
        RunOptions {
            resume,
            interrupt_after: None,
        },
        &mut |m| eprintln!("{m}"),
    )?;
    println!("metrics: {}", summary.metrics_path.display());
    print!("{}", report::to_text(&report::summarize(&summary.rows)));
    Ok(true)
}

fn print_checks(checks: impl IntoIterator<Item = (String, bool)>) -> bool {
    let mut all = true;
    for (line, ok) in checks {
        println!("[{}] {line}", if ok { "PASS" } else { "FAIL" });
        all &= ok;
    }
    all
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            scale,
            resume,
        } => train(&config, out.as_deref(), seed, scale, resume),
        Command::VerifyKl {
            grid,
            samples,
            seed,
            out,
        } => {
            let rep = verify_kl(&KlConfig {
                grid,
                samples,
                seed,
            })?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                let path = dir.join("kl_report.csv");
                rep.write_csv(&path)?;
                println!("report: {}", path.display());
            }
            Ok(print_checks(rep.summary()))
        }
        Command::VerifyLrt {
            samples,
            seed,
            penalty,
            zero_variance,
        } => {
            let rep = verify_lrt(&LrtConfig {
                samples,
                seed,
                penalty: penalty.into(),
                zero_variance,
            })?;
            let mut lines = vec![(
                format!(
                    "{} of {} moment checks beyond 3 SE (allowed {}), max |z| {:.2}",
                    rep.exceedances(),
                    rep.checks.len(),
                    rep.allowed(),
                    rep.max_abs_z()
                ),
                rep.exceedances() <= rep.allowed(),
            )];
            for c in rep.failures() {
                println!(
                    "  beyond 3 SE: {} = {:.5} vs {:.5} (z = {:.2})",
                    c.name,
                    c.estimate,
                    c.expected,
                    c.z()
                );
            }
            if let Some(exact) = rep.exact_zero_variance {
                lines.push((
                    "zero variance: outputs equal the mean exactly".into(),
                    exact,
                ));
            }
            println!("relation magnitude: {:.4e}", rep.max_relation);
            Ok(print_checks(lines))
        }
        Command::Gradcheck => {
            let rep = gradcheck_sweep()?;
            print!("{}", rep.to_text());
            Ok(print_checks([(
                format!("max rel. error {:.3e} (< 1e-5)", rep.max_rel_err()),
                rep.passed(),
            )]))
        }
        Command::Report { dir, out } => {
            let rows = report::collect_dir(&dir)?;
            let table = report::summarize(&rows);
            print!("{}", report::to_text(&table));
            if let Some(out) = out {
                std::fs::create_dir_all(&out)?;
                report::write_csv(&table, out.join("report.csv"))?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
