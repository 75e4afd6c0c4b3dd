//! CSV/JSON artifact writers. All numeric text is written with 17
//! significant digits so the files parse back losslessly.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::TrajectoryLog;
use crate::learner::IterationRecord;

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// One row per step: `k, T_1..T_n, P_1..P_n, e_1..e_n, du_1..du_n,
/// stage_cost, gain_id`.
pub fn write_trajectory_csv(path: &Path, log: &TrajectoryLog) -> Result<()> {
    let n = log
        .steps
        .first()
        .map(|s| s.t.len())
        .ok_or_else(|| Error::Io("cannot write an empty trajectory".into()))?;
    let mut out = String::new();
    out.push('k');
    for prefix in ["T", "P", "e", "du"] {
        for i in 1..=n {
            let _ = write!(out, ",{prefix}_{i}");
        }
    }
    out.push_str(",stage_cost,gain_id\n");
    for row in &log.steps {
        let _ = write!(out, "{}", row.step);
        for vec in [&row.t, &row.p, &row.e, &row.du] {
            for value in vec.iter() {
                let _ = write!(out, ",{}", fmt(*value));
            }
        }
        let _ = writeln!(out, ",{},{}", fmt(row.stage_cost), row.gain_id);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One row per policy-iteration update:
/// `iteration, gain_delta, oracle_distance, spectral_radius`.
pub fn write_iterations_csv(path: &Path, records: &[IterationRecord]) -> Result<()> {
    let mut out = String::from("iteration,gain_delta,oracle_distance,spectral_radius\n");
    for record in records {
        let oracle = record.oracle_distance.map(fmt).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{}",
            record.iteration,
            fmt(record.gain_delta),
            oracle,
            fmt(record.spectral_radius)
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_summary_json<T: Serialize>(path: &Path, summary: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
