//! Result tables, the timing sidecar and episode logs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use kpomdp::dataset::format_f64;

use crate::error::{HarnessError, Result};
use crate::experiment::{ControllerRun, ResultRow, Timing};

pub const RESULT_HEADER: &str =
    "fingerprint,env,n,controller,depth,discount,episodes,mean,stderr,reset_rate,mean_nodes,seed";
pub const TIMING_HEADER: &str = "n,controller,data_secs,train_secs,eval_secs";

impl ResultRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.fingerprint,
            self.env,
            self.n,
            self.controller.label(),
            self.depth,
            format_f64(self.discount),
            self.episodes,
            format_f64(self.mean),
            format_f64(self.stderr),
            format_f64(self.reset_rate),
            format_f64(self.mean_nodes),
            self.seed
        )
    }

    /// One-line human summary.
    pub fn summary_line(&self) -> String {
        format!(
            "env={} controller={} n={} d={} gamma={} N={} mean={:.4} stderr={:.4} seed={}",
            self.env,
            self.controller.label(),
            self.n,
            self.depth,
            self.discount,
            self.episodes,
            self.mean,
            self.stderr,
            self.seed
        )
    }
}

impl Timing {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.3}",
            self.n,
            self.controller.label(),
            self.data_secs,
            self.train_secs,
            self.eval_secs
        )
    }
}

fn write_lines(path: &Path, header: &str, lines: impl Iterator<Item = String>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| HarnessError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| HarnessError::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for line in lines {
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_results(path: &Path, runs: &[ControllerRun]) -> Result<()> {
    write_lines(path, RESULT_HEADER, runs.iter().map(|r| r.row.to_csv()))
}

pub fn write_timing(path: &Path, runs: &[ControllerRun]) -> Result<()> {
    write_lines(path, TIMING_HEADER, runs.iter().map(|r| r.timing.to_csv()))
}

/// `<dir>/<controller>-n<n>-ep<i>.csv` for every episode.
pub fn write_episode_logs(dir: &Path, runs: &[ControllerRun]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    for run in runs {
        for (i, log) in run.summary.logs.iter().enumerate() {
            let path = dir.join(format!("{}-n{}-ep{i}.csv", run.row.controller.label(), run.row.n));
            let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
            let mut w = BufWriter::new(file);
            log.write_csv(&mut w).map_err(|e| HarnessError::io(&path, e))?;
            w.flush().map_err(|e| HarnessError::io(&path, e))?;
        }
    }
    Ok(())
}
