use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lab::config::{Experiment, ExperimentConfig, Seeds};
use lab::HarnessError;

/// Runs one experiment from a JSON configuration and writes CSV, summary and
/// plot data files.
#[derive(Debug, Parser)]
#[command(name = "lab", version)]
struct Cli {
    experiment: Experiment,
    #[arg(long)]
    config: PathBuf,
    /// Overrides the number of seeds (realizations or trials).
    #[arg(long)]
    seeds: Option<usize>,
    /// Worker threads; results do not depend on this.
    #[arg(long, env = "LAB_WORKERS")]
    workers: Option<usize>,
    /// Output directory; defaults to the configured one, then `out/<experiment>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(cli: &Cli) -> Result<(ExperimentConfig, usize, PathBuf), HarnessError> {
    let mut cfg = ExperimentConfig::from_file(&cli.config)?;
    if cfg.experiment != cli.experiment {
        return Err(HarnessError::config(
            "experiment",
            format!(
                "the file configures `{}` but `{}` was requested",
                cfg.experiment.name(),
                cli.experiment.name()
            ),
        ));
    }
    if let Some(count) = cli.seeds {
        let base = cfg.seeds.as_ref().map_or(0, |s| s.base);
        cfg.seeds = Some(Seeds { base, count });
    }
    let workers = cli.workers.or(cfg.workers).unwrap_or_else(lab::default_workers);
    if workers == 0 {
        return Err(HarnessError::config("workers", "need at least one worker"));
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| PathBuf::from("out").join(cli.experiment.name()));
    Ok((cfg, workers, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = load(&cli).and_then(|(cfg, workers, out)| lab::execute(cfg, workers, &out));
    match result {
        Ok((report, written)) => {
            for v in &report.verdicts {
                println!("{} {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
            }
            for p in written {
                eprintln!("wrote {}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("lab: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
