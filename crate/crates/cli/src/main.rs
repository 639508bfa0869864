use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ububu_cli::commands::{cmd_ess_report, cmd_run, cmd_strong_order, output_dir};
use ububu_cli::{CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ububu", version, about = "Unbiased multilevel kinetic Langevin experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured sampler and write result rows.
    Run(Common),
    /// Measure coupled-path gaps across stepsizes.
    StrongOrder(Common),
    /// Summarise grads/ESS from the config's output directory.
    EssReport(Common),
}

fn load(c: &Common) -> CliResult<ExperimentConfig> {
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let mut cfg = ExperimentConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load(&c)?;
            let out = output_dir(&cfg, c.output.as_deref());
            let outcome = cmd_run(&cfg, &out)?;
            for r in &outcome.rows {
                println!(
                    "{:<10} {:<8} estimate {:>12.6} ess {:>10.3} grads/ess {:>10.4}",
                    r.mode, r.function, r.estimate, r.ess, r.grads_per_ess
                );
            }
            println!("wrote {}", outcome.dir.display());
        }
        Command::StrongOrder(c) => {
            let cfg = load(&c)?;
            let out = output_dir(&cfg, c.output.as_deref());
            let res = cmd_strong_order(&cfg, &out)?;
            for r in &res.rows {
                println!("h {:>10.5}  rms gap {:.6e}", r.h, r.rms_gap);
            }
            for h in &res.skipped {
                println!("h {h:>10.5}  skipped (unstable)");
            }
            println!("slope {:.4} ± {:.4}", res.fit.slope, res.fit.slope_se);
            println!("wrote {}", out.display());
        }
        Command::EssReport(c) => {
            let cfg = load(&c)?;
            let input = output_dir(&cfg, c.output.as_deref());
            let rep = cmd_ess_report(&input, &input)?;
            for s in &rep.summary {
                let ci = match (s.ci_lo, s.ci_hi) {
                    (Some(lo), Some(hi)) => format!("[{lo:.4}, {hi:.4}]"),
                    _ => "-".into(),
                };
                println!(
                    "{:<16} {:<12} max grads/ess {:>10.4} ({}) CI {}",
                    s.experiment, s.mode, s.max_grads_per_ess, s.max_function, ci
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
