//! Per-step trace rows (`traces.csv`) and per-grid-point aggregates (`sweep.csv`).
//!
//! Row `t` records the decision taken at step `t` with the quantile current at
//! that moment, plus the delayed score that arrived at step `t` (for the
//! forecast issued `horizon` steps earlier). `err` is `score > quantile` on the
//! same row, so the bit is recomputable from the file alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub schema_version: u32,
    pub scenario: String,
    pub method: String,
    pub q_safe: f64,
    pub seed: u64,
    pub step: usize,
    /// Seconds since episode start.
    pub t: f64,
    pub pos_x: f64,
    pub pos_y: f64,
    /// Track only.
    pub heading: Option<f64>,
    /// Highway only.
    pub lane: Option<usize>,
    /// Ego speed (highway) or commanded linear speed (track), m/s.
    pub speed: f64,
    /// Highway ego action; empty for track.
    pub action: String,
    /// Highway only, meters.
    pub nearest_distance: Option<f64>,
    /// Forecast issued at this step; empty during warm-up.
    pub danger: Option<f64>,
    pub quantile: f64,
    /// Score that arrived at this step; empty when none was due.
    pub score: Option<f64>,
    pub err: Option<u8>,
    /// `safe`/`speed` (highway), `slow_down`/`speed_up`/`false_positive` (track), or `warmup`/`fixed`.
    pub decision: String,
    pub kp: Option<f64>,
    pub failure: Option<u8>,
}

impl StepLog {
    /// `err == (score > quantile)` whenever a score is present.
    pub fn consistent(&self) -> bool {
        match (self.score, self.err) {
            (Some(s), Some(e)) => (e == 1) == (s > self.quantile) && e <= 1,
            (None, None) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub schema_version: u32,
    pub scenario: String,
    pub method: String,
    pub q_safe: f64,
    pub n: usize,
    pub duration_mean: f64,
    pub duration_std: f64,
    /// Mean ego speed (highway) or commanded speed (track).
    pub speed_mean: f64,
    pub speed_std: f64,
    /// Track only: start/end displacement of the true pose.
    pub tracking_error_mean: Option<f64>,
    pub tracking_error_std: Option<f64>,
    /// Track only: RMS distance of the true pose from the path.
    pub cross_track_mean: Option<f64>,
    /// Highway only.
    pub collision_rate: Option<f64>,
    /// Fraction of scored steps with `err == 0`.
    pub coverage: f64,
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::parse(line, e.to_string())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Config(format!("{other:?}")),
    })?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(text: &str, version: impl Fn(&T) -> u32) -> Result<Vec<T>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<T>().enumerate() {
        let row = rec.map_err(csv_err)?;
        let v = version(&row);
        if v != TRACE_SCHEMA_VERSION {
            return Err(Error::parse(
                i + 2,
                format!("schema_version {v} not supported (expected {TRACE_SCHEMA_VERSION})"),
            ));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_traces(path: &Path, rows: &[StepLog]) -> Result<()> {
    write_rows(path, rows)
}

/// Parses a trace file, rejecting foreign schema versions and rows whose
/// `err` bit disagrees with `score > quantile`.
pub fn parse_traces(text: &str) -> Result<Vec<StepLog>> {
    let rows = read_rows(text, |r: &StepLog| r.schema_version)?;
    if let Some(i) = rows.iter().position(|r| !r.consistent()) {
        return Err(Error::parse(i + 2, "err bit disagrees with score > quantile"));
    }
    Ok(rows)
}

pub fn read_traces(path: &Path) -> Result<Vec<StepLog>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_traces(&text)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_rows(path, rows)
}

pub fn parse_sweep(text: &str) -> Result<Vec<SweepRow>> {
    read_rows(text, |r: &SweepRow| r.schema_version)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_row() -> StepLog {
        StepLog {
            schema_version: TRACE_SCHEMA_VERSION,
            scenario: "highway".into(),
            method: "quantile".into(),
            q_safe: 0.6,
            seed: 3,
            step: 7,
            t: 7.0,
            pos_x: 180.25,
            pos_y: 8.0,
            heading: None,
            lane: Some(2),
            speed: 25.0,
            action: "keep".into(),
            nearest_distance: Some(31.5),
            danger: Some(0.08),
            quantile: 0.125,
            score: Some(0.2),
            err: Some(1),
            decision: "speed".into(),
            kp: None,
            failure: None,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.csv");
        let mut rows = vec![sample_row()];
        let mut warm = sample_row();
        warm.score = None;
        warm.err = None;
        warm.danger = None;
        warm.step = 0;
        rows.push(warm);
        write_traces(&path, &rows).unwrap();
        assert_eq!(read_traces(&path).unwrap(), rows);
    }

    #[test]
    fn rejects_inconsistent_err() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.csv");
        let mut row = sample_row();
        row.err = Some(0);
        write_traces(&path, &[row]).unwrap();
        assert!(read_traces(&path).is_err());
    }

    #[test]
    fn rejects_foreign_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traces.csv");
        let mut row = sample_row();
        row.schema_version = 9;
        write_traces(&path, &[row]).unwrap();
        assert!(read_traces(&path).is_err());
        assert!(parse_traces("garbage,header\n1,2,3\n").is_err());
    }

    #[test]
    fn sweep_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        let row = SweepRow {
            schema_version: TRACE_SCHEMA_VERSION,
            scenario: "track".into(),
            method: "no_quantile".into(),
            q_safe: 0.8,
            n: 30,
            duration_mean: 31.5,
            duration_std: 4.0,
            speed_mean: 0.3,
            speed_std: 0.01,
            tracking_error_mean: Some(0.2),
            tracking_error_std: Some(0.1),
            cross_track_mean: Some(0.05),
            collision_rate: None,
            coverage: 0.81,
        };
        write_sweep(&path, &[row.clone()]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(parse_sweep(&text).unwrap(), vec![row]);
    }
}
