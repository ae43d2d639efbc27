use std::path::Path;

use serde::Serialize;

use super::run::{ExperimentReport, Timings};
use crate::error::{CilError, Result};

#[derive(Serialize)]
struct Line<'a> {
    run_id: &'a str,
    seed: u64,
    session: usize,
    acc: f64,
    acc_new: f64,
    acc_old: Option<f64>,
    a_last: f64,
    a_avg: f64,
    timings: Timings,
}

/// One JSON object per seed and session; sessions are 1-based.
pub fn report_jsonl(report: &ExperimentReport) -> String {
    let mut out = String::new();
    for run in &report.runs {
        for (t, s) in run.sessions.iter().enumerate() {
            let line = Line {
                run_id: &run.run_id,
                seed: run.seed,
                session: t + 1,
                acc: s.acc,
                acc_new: s.acc_new,
                acc_old: s.acc_old,
                a_last: run.a_last,
                a_avg: run.a_avg,
                timings: s.timings,
            };
            out.push_str(&serde_json::to_string(&line).expect("plain data serializes"));
            out.push('\n');
        }
    }
    out
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CilError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CilError::io(path, e))
}

/// Writes `report.jsonl` and `seed_<k>/confusion_s<t>.csv` under `dir`.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    write(&dir.join("report.jsonl"), &report_jsonl(report))?;
    for run in &report.runs {
        for (t, s) in run.sessions.iter().enumerate() {
            let path = dir.join(format!("seed_{}", run.seed)).join(format!("confusion_s{}.csv", t + 1));
            write(&path, &s.confusion.to_csv())?;
        }
    }
    Ok(())
}

/// Writes any serializable value as pretty JSON.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    write(path, &serde_json::to_string_pretty(value).expect("plain data serializes"))
}
