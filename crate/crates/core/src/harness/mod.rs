//! Experiment configuration, logging and run orchestration.

mod config;
mod experiment;
mod log;

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub use config::{config_load, config_parse, parse_overrides, Ablation, Algorithm, HeadName, HeadSpec, RunConfig};
pub use experiment::{
    area_under_curve, build_id, expand, mean_std, random_policy_return, run_cell, run_experiment, summarize, Cell,
    CellOutcome, ExperimentReport, RunManifest, SettingSummary, Summary,
};
pub use log::{fmt_sig9, read_metrics_csv, CellSink, CsvLog};

/// Writes `bytes` to a temporary sibling of `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}
