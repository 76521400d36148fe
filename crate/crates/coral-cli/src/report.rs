//! CSV and gnuplot-style outputs for evaluation reports and training
//! traces.

use std::fs;
use std::io::Write;
use std::path::Path;

use coral_core::train::TrainRecord;

use crate::pipeline::{EvalReport, Result};

/// Metrics table: header row, one metric per column.
pub fn write_metrics_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut out = String::from("split,grid,mse,rel_l2\n");
    for e in &report.entries {
        out.push_str(&format!("{},{},{:e},{:e}\n", e.split, e.grid, e.mse, e.rel_l2));
    }
    write_text(path, &out)
}

/// Per-timestep error curve as CSV (`t,mse`), one row per evaluated step.
pub fn write_curve_csv(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    let mut out = String::from("t,mse\n");
    for (t, m) in curve {
        out.push_str(&format!("{t},{m:e}\n"));
    }
    write_text(path, &out)
}

/// Gnuplot-compatible two-column data file with a comment header.
pub fn write_curve_dat(path: &Path, title: &str, curve: &[(usize, f64)]) -> Result<()> {
    let mut out = format!("# {title}\n# t mse\n");
    for (t, m) in curve {
        out.push_str(&format!("{t} {m:e}\n"));
    }
    write_text(path, &out)
}

/// Training trace as CSV: epoch, loss, lr, alpha.
pub fn write_trace_csv(path: &Path, trace: &[TrainRecord]) -> Result<()> {
    let mut out = String::from("epoch,loss,lr,alpha\n");
    for r in trace {
        out.push_str(&format!("{},{:e},{:e},{:e}\n", r.epoch, r.loss, r.lr, r.alpha));
    }
    write_text(path, &out)
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(report).expect("report serializes"))
}

pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path)
        .map_err(|e| crate::pipeline::PipelineError::Invalid(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| crate::pipeline::PipelineError::Invalid(format!("bad report {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)
            .map_err(|e| crate::pipeline::PipelineError::Invalid(format!("cannot create {}: {e}", dir.display())))?;
    }
    let mut f = fs::File::create(path)
        .map_err(|e| crate::pipeline::PipelineError::Invalid(format!("cannot write {}: {e}", path.display())))?;
    f.write_all(text.as_bytes())
        .map_err(|e| crate::pipeline::PipelineError::Invalid(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}
