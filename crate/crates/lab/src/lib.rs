//! Configuration, orchestration and file output for the `lab` command.

pub mod config;
pub mod emit;
pub mod error;
pub mod run;

use std::path::{Path, PathBuf};

pub use config::{Experiment, ExperimentConfig};
pub use emit::EnsembleReport;
pub use error::HarnessError;

/// Worker count when neither the command line, `LAB_WORKERS` nor the
/// configuration sets one.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Resolves, runs and emits; the output directory is checked before any
/// computation. A run with failed cells still writes its files and then
/// reports [`HarnessError::Partial`].
pub fn execute(cfg: ExperimentConfig, workers: usize, out_dir: &Path) -> Result<(EnsembleReport, Vec<PathBuf>), HarnessError> {
    let cfg = cfg.resolve()?;
    emit::check_writable(out_dir)?;
    let report = run::run_with_workers(&cfg, workers)?;
    let written = emit::emit(&report, &cfg.canonical_json(), out_dir)?;
    if !report.failed_cells.is_empty() {
        return Err(HarnessError::Partial {
            failed: report.failed_cells.len(),
            total: report.total_cells,
        });
    }
    Ok((report, written))
}
