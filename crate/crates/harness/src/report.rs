//! Machine-readable sweep reports.
//!
//! A sweep produces one [`SweepReport`]: raw per-trial points, five-number
//! summaries, and (for curve-style sweeps) `(x, y, mode)` triples — enough to
//! regenerate every figure downstream without rerunning anything. Reports
//! carry no timestamps; wall-clock metadata goes to a separate
//! `run_meta.json` so rerunning a sweep with the same seeds yields
//! byte-identical report files.

use crate::stats::DistributionSummary;
use adapterbench_core::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

pub const REPORT_SCHEMA_VERSION: &str = "abench-report-v1";

/// One trial's metrics at one grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportPoint {
    pub mode: String,
    pub axis_value: u64,
    pub trial: usize,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

/// A named distribution, e.g. one mode's dev scores across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub key: String,
    pub mode: String,
    pub summary: DistributionSummary,
}

/// A curve sample for line plots (attack curves, iteration curves).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub mode: String,
    pub x: u64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: String,
    pub sweep_kind: String,
    pub axis: String,
    pub primary_metric: String,
    pub modes: Vec<String>,
    pub run_count: usize,
    pub points: Vec<ReportPoint>,
    pub summaries: Vec<SummaryRow>,
    pub curves: Vec<CurvePoint>,
}

impl SweepReport {
    pub fn new(sweep_kind: &str, axis: &str, primary_metric: &str, modes: Vec<String>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION.to_string(),
            sweep_kind: sweep_kind.to_string(),
            axis: axis.to_string(),
            primary_metric: primary_metric.to_string(),
            modes,
            run_count: 0,
            points: Vec::new(),
            summaries: Vec::new(),
            curves: Vec::new(),
        }
    }

    /// Deterministic ordering regardless of execution order.
    pub fn sort(&mut self) {
        self.points
            .sort_by(|a, b| (&a.mode, a.axis_value, a.trial).cmp(&(&b.mode, b.axis_value, b.trial)));
        self.summaries
            .sort_by(|a, b| (&a.mode, &a.key).cmp(&(&b.mode, &b.key)));
        self.curves
            .sort_by(|a, b| (&a.mode, a.x).cmp(&(&b.mode, b.x)));
    }

    pub fn load(path: &Path) -> Result<SweepReport> {
        let raw = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&raw)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Write the report files into `dir`; returns the paths written. Timestamps
/// live only in `run_meta.json`, which is not part of the returned set.
pub fn emit_report(report: &SweepReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    if report.points.is_empty() && report.curves.is_empty() {
        return Err(Error::Data(
            "refusing to emit an empty report: no points and no curves".into(),
        ));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for format in formats {
        match format {
            ReportFormat::Json => {
                let path = dir.join("report.json");
                let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
                serde_json::to_writer_pretty(&mut f, report)?;
                f.write_all(b"\n")?;
                f.flush()?;
                written.push(path);
            }
            ReportFormat::Csv => {
                written.extend(emit_csv(report, dir)?);
            }
        }
    }
    // wall-clock metadata kept out of the deterministic artifacts
    let meta = serde_json::json!({
        "generated_unix_ms": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        "sweep_kind": report.sweep_kind,
    });
    std::fs::write(dir.join("run_meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(written)
}

fn emit_csv(report: &SweepReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    // points.csv: one row per (trial, metric)
    let points_path = dir.join("points.csv");
    {
        let mut w = csv::Writer::from_path(&points_path).map_err(csv_err)?;
        w.write_record(["mode", "axis_value", "trial", "seed", "metric", "value"]).map_err(csv_err)?;
        for p in &report.points {
            for (metric, value) in &p.metrics {
                w.write_record([
                    p.mode.as_str(),
                    &p.axis_value.to_string(),
                    &p.trial.to_string(),
                    &p.seed.to_string(),
                    metric,
                    &value.to_string(),
                ]).map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    written.push(points_path);

    // summaries.csv: five-number rows
    let summaries_path = dir.join("summaries.csv");
    {
        let mut w = csv::Writer::from_path(&summaries_path).map_err(csv_err)?;
        w.write_record(["key", "mode", "n", "mean", "std", "min", "q1", "median", "q3", "max"]).map_err(csv_err)?;
        for s in &report.summaries {
            w.write_record([
                s.key.as_str(),
                s.mode.as_str(),
                &s.summary.n.to_string(),
                &s.summary.mean.to_string(),
                &s.summary.std.to_string(),
                &s.summary.min.to_string(),
                &s.summary.q1.to_string(),
                &s.summary.median.to_string(),
                &s.summary.q3.to_string(),
                &s.summary.max.to_string(),
            ]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    written.push(summaries_path);

    if !report.curves.is_empty() {
        let curves_path = dir.join("curves.csv");
        let mut w = csv::Writer::from_path(&curves_path).map_err(csv_err)?;
        w.write_record(["mode", "x", "y"]).map_err(csv_err)?;
        for c in &report.curves {
            w.write_record([c.mode.as_str(), &c.x.to_string(), &c.y.to_string()]).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Data(format!("csv: {e}")))?;
        written.push(curves_path);
    }
    Ok(written)
}

/// Parse `summaries.csv` back into rows (numeric fields only; raw values
/// live in `points.csv`).
pub fn read_summaries_csv(path: &Path) -> Result<Vec<(String, String, [f64; 8])>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 10 {
            return Err(Error::Schema(format!(
                "summaries.csv row has {} fields, expected 10",
                rec.len()
            )));
        }
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::Data(format!("summaries.csv: bad number '{}'", &rec[i])))
        };
        let mut nums = [0.0; 8];
        for (j, i) in (2..10).enumerate() {
            nums[j] = parse(i)?;
        }
        out.push((rec[0].to_string(), rec[1].to_string(), nums));
    }
    Ok(out)
}

/// Parse `points.csv` back into (mode, axis_value, trial, metric, value) rows.
pub fn read_points_csv(path: &Path) -> Result<Vec<(String, u64, usize, String, f64)>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        out.push((
            rec[0].to_string(),
            rec[1].parse().map_err(|_| Error::Data("points.csv: bad axis_value".into()))?,
            rec[2].parse().map_err(|_| Error::Data("points.csv: bad trial".into()))?,
            rec[4].to_string(),
            rec[5].parse().map_err(|_| Error::Data("points.csv: bad value".into()))?,
        ));
    }
    Ok(out)
}

// ── Minimal JSON-schema validation ──────────────────────────────────────

/// Validate an instance against the subset of JSON Schema used by the
/// shipped report schema: `type`, `properties`, `required`, `items`.
pub fn validate_schema(schema: &serde_json::Value, instance: &serde_json::Value) -> Result<()> {
    validate_at(schema, instance, "$")
}

fn validate_at(schema: &serde_json::Value, instance: &serde_json::Value, path: &str) -> Result<()> {
    let fail = |msg: String| Err(Error::Schema(format!("{path}: {msg}")));
    if let Some(ty) = schema.get("type").and_then(|t| t.as_str()) {
        let ok = match ty {
            "object" => instance.is_object(),
            "array" => instance.is_array(),
            "string" => instance.is_string(),
            "number" => instance.is_number(),
            "integer" => instance.is_i64() || instance.is_u64(),
            "boolean" => instance.is_boolean(),
            "null" => instance.is_null(),
            other => return fail(format!("unsupported schema type '{other}'")),
        };
        if !ok {
            return fail(format!("expected {ty}, found {instance}"));
        }
    }
    if let Some(required) = schema.get("required").and_then(|r| r.as_array()) {
        let obj = instance
            .as_object()
            .ok_or_else(|| Error::Schema(format!("{path}: required on non-object")))?;
        for key in required {
            let key = key.as_str().unwrap_or_default();
            if !obj.contains_key(key) {
                return fail(format!("missing required field '{key}'"));
            }
        }
    }
    if let Some(props) = schema.get("properties").and_then(|p| p.as_object()) {
        if let Some(obj) = instance.as_object() {
            for (key, sub) in props {
                if let Some(v) = obj.get(key) {
                    validate_at(sub, v, &format!("{path}.{key}"))?;
                }
            }
        }
    }
    if let Some(items) = schema.get("items") {
        if let Some(arr) = instance.as_array() {
            for (i, v) in arr.iter().enumerate() {
                validate_at(items, v, &format!("{path}[{i}]"))?;
            }
        }
    }
    Ok(())
}

/// The schema file shipped with the crate.
pub fn report_schema() -> serde_json::Value {
    serde_json::from_str(include_str!("../schema/report.schema.json"))
        .expect("shipped schema parses")
}
