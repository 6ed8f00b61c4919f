//! Report emission: the JSON impact report with a structural schema
//! check enforced on every write, plus per-scope CSV tables for plotting.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::impact::{ImpactReport, ImpactStats, IMPACT_METRICS};
use crate::inference::WeightedStats;
use crate::io::format_float;
use crate::types::{Mode, NUM_MODES};

/// The schema the emitted JSON must satisfy; shipped alongside the code.
pub const REPORT_SCHEMA: &str = include_str!("../../schemas/report.schema.json");

/// One metric's posterior summary as serialized in reports.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub ci95: [f64; 2],
}

impl From<WeightedStats> for MetricSummary {
    fn from(s: WeightedStats) -> Self {
        MetricSummary {
            mean: s.mean,
            std: s.std,
            ci95: [s.ci95_low, s.ci95_high],
        }
    }
}

/// Metric summaries for one zone or wage group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeEntry {
    pub key: String,
    pub metrics: BTreeMap<String, MetricSummary>,
}

/// The emitted report document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub scenario: String,
    pub config_digest: String,
    pub citywide: BTreeMap<String, MetricSummary>,
    pub per_zone: Vec<ScopeEntry>,
    pub per_wage: Vec<ScopeEntry>,
    pub shift_matrix: Vec<Vec<f64>>,
}

fn metric_block(stats: &ImpactStats) -> BTreeMap<String, MetricSummary> {
    stats
        .iter()
        .map(|(name, &s)| (name.clone(), MetricSummary::from(s)))
        .collect()
}

impl Report {
    /// Assemble the document from an aggregated impact report.
    pub fn from_impact(scenario: &str, config_digest: &str, impact: &ImpactReport) -> Report {
        let scope_entries = |scopes: &BTreeMap<String, ImpactStats>| {
            scopes
                .iter()
                .map(|(key, stats)| ScopeEntry {
                    key: key.clone(),
                    metrics: metric_block(stats),
                })
                .collect()
        };
        Report {
            scenario: scenario.to_owned(),
            config_digest: config_digest.to_owned(),
            citywide: metric_block(&impact.citywide),
            per_zone: scope_entries(&impact.per_zone),
            per_wage: scope_entries(&impact.per_wage),
            shift_matrix: impact
                .shift_matrix
                .counts
                .iter()
                .map(|row| row.to_vec())
                .collect(),
        }
    }
}

fn fail(detail: impl Into<String>) -> Error {
    Error::SchemaMismatch {
        file: "report.json".to_owned(),
        detail: detail.into(),
    }
}

fn as_finite(v: &Value, context: &str) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| fail(format!("{context}: expected a finite number, got {v}")))
}

fn check_metric_summary(v: &Value, context: &str) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| fail(format!("{context}: expected an object")))?;
    for key in obj.keys() {
        if !["mean", "std", "ci95"].contains(&key.as_str()) {
            return Err(fail(format!("{context}: unexpected key '{key}'")));
        }
    }
    as_finite(
        obj.get("mean").ok_or_else(|| fail(format!("{context}: missing mean")))?,
        context,
    )?;
    let std = as_finite(
        obj.get("std").ok_or_else(|| fail(format!("{context}: missing std")))?,
        context,
    )?;
    if std < 0.0 {
        return Err(fail(format!("{context}: negative std {std}")));
    }
    let ci = obj
        .get("ci95")
        .and_then(Value::as_array)
        .ok_or_else(|| fail(format!("{context}: ci95 must be a 2-array")))?;
    if ci.len() != 2 {
        return Err(fail(format!("{context}: ci95 must have 2 entries")));
    }
    let lo = as_finite(&ci[0], context)?;
    let hi = as_finite(&ci[1], context)?;
    if lo > hi {
        return Err(fail(format!("{context}: ci95 out of order [{lo}, {hi}]")));
    }
    Ok(())
}

fn check_metric_block(v: &Value, context: &str) -> Result<()> {
    let obj = v
        .as_object()
        .ok_or_else(|| fail(format!("{context}: expected a metric object")))?;
    for name in IMPACT_METRICS {
        let summary = obj
            .get(name)
            .ok_or_else(|| fail(format!("{context}: missing metric '{name}'")))?;
        check_metric_summary(summary, &format!("{context}.{name}"))?;
    }
    for key in obj.keys() {
        if !IMPACT_METRICS.contains(&key.as_str()) {
            return Err(fail(format!("{context}: unknown metric '{key}'")));
        }
    }
    Ok(())
}

fn check_scope_array(v: &Value, context: &str) -> Result<()> {
    let entries = v
        .as_array()
        .ok_or_else(|| fail(format!("{context}: expected an array")))?;
    for (i, entry) in entries.iter().enumerate() {
        let context = format!("{context}[{i}]");
        let obj = entry
            .as_object()
            .ok_or_else(|| fail(format!("{context}: expected an object")))?;
        for key in obj.keys() {
            if !["key", "metrics"].contains(&key.as_str()) {
                return Err(fail(format!("{context}: unexpected key '{key}'")));
            }
        }
        obj.get("key")
            .and_then(Value::as_str)
            .ok_or_else(|| fail(format!("{context}: missing string 'key'")))?;
        check_metric_block(
            obj.get("metrics")
                .ok_or_else(|| fail(format!("{context}: missing 'metrics'")))?,
            &context,
        )?;
    }
    Ok(())
}

/// Structural validation mirroring the shipped schema: required keys,
/// metric coverage, summary shapes, and a non-negative 6×6 shift matrix.
pub fn validate_report_json(value: &Value) -> Result<()> {
    let obj = value
        .as_object()
        .ok_or_else(|| fail("root must be an object"))?;
    const TOP: [&str; 6] = [
        "scenario",
        "config_digest",
        "citywide",
        "per_zone",
        "per_wage",
        "shift_matrix",
    ];
    for key in TOP {
        if !obj.contains_key(key) {
            return Err(fail(format!("missing top-level key '{key}'")));
        }
    }
    for key in obj.keys() {
        if !TOP.contains(&key.as_str()) {
            return Err(fail(format!("unexpected top-level key '{key}'")));
        }
    }
    obj["scenario"]
        .as_str()
        .ok_or_else(|| fail("scenario must be a string"))?;
    let digest = obj["config_digest"]
        .as_str()
        .ok_or_else(|| fail("config_digest must be a string"))?;
    if digest.len() != 64 || !digest.chars().all(|c| c.is_ascii_hexdigit() && !c.is_uppercase()) {
        return Err(fail("config_digest must be 64 lowercase hex characters"));
    }
    check_metric_block(&obj["citywide"], "citywide")?;
    check_scope_array(&obj["per_zone"], "per_zone")?;
    check_scope_array(&obj["per_wage"], "per_wage")?;
    let matrix = obj["shift_matrix"]
        .as_array()
        .ok_or_else(|| fail("shift_matrix must be an array"))?;
    if matrix.len() != NUM_MODES {
        return Err(fail(format!("shift_matrix must have {NUM_MODES} rows")));
    }
    for (i, row) in matrix.iter().enumerate() {
        let row = row
            .as_array()
            .ok_or_else(|| fail(format!("shift_matrix[{i}] must be an array")))?;
        if row.len() != NUM_MODES {
            return Err(fail(format!("shift_matrix[{i}] must have {NUM_MODES} columns")));
        }
        for (j, v) in row.iter().enumerate() {
            let x = as_finite(v, &format!("shift_matrix[{i}][{j}]"))?;
            if x < 0.0 {
                return Err(fail(format!("shift_matrix[{i}][{j}] is negative")));
            }
        }
    }
    Ok(())
}

/// Serialize, validate against the schema, and write the report.
pub fn emit_report_json(path: &Path, report: &Report) -> Result<()> {
    let value = serde_json::to_value(report)?;
    validate_report_json(&value)?;
    let mut body = serde_json::to_string_pretty(&value)?;
    body.push('\n');
    std::fs::write(path, body)?;
    Ok(())
}

/// Load and validate a previously emitted report.
pub fn load_report(path: &Path) -> Result<Report> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.display().to_string()));
    }
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    validate_report_json(&value)?;
    Ok(serde_json::from_value(value)?)
}

fn summary_row(prefix: &str, name: &str, s: &MetricSummary) -> String {
    format!(
        "{prefix}{name},{},{},{},{}\n",
        format_float(s.mean),
        format_float(s.std),
        format_float(s.ci95[0]),
        format_float(s.ci95[1]),
    )
}

/// Emit per-scope CSV tables (citywide, per-zone, per-wage, shift matrix)
/// into a directory, for plotting.
pub fn emit_report_csv(dir: &Path, report: &Report) -> Result<()> {
    std::fs::create_dir_all(dir)?;

    let mut citywide = String::from("metric,mean,std,ci95_low,ci95_high\n");
    for name in IMPACT_METRICS {
        if let Some(s) = report.citywide.get(name) {
            citywide.push_str(&summary_row("", name, s));
        }
    }
    std::fs::write(dir.join("citywide.csv"), citywide)?;

    for (file, scope_name, entries) in [
        ("per_zone.csv", "zone", &report.per_zone),
        ("per_wage.csv", "wage_group", &report.per_wage),
    ] {
        let mut table = format!("{scope_name},metric,mean,std,ci95_low,ci95_high\n");
        for entry in entries {
            for name in IMPACT_METRICS {
                if let Some(s) = entry.metrics.get(name) {
                    table.push_str(&summary_row(&format!("{},", entry.key), name, s));
                }
            }
        }
        std::fs::write(dir.join(file), table)?;
    }

    let mut matrix = String::from("from_mode");
    for m in Mode::ALL {
        matrix.push_str(&format!(",to_{m}"));
    }
    matrix.push('\n');
    for (i, row) in report.shift_matrix.iter().enumerate() {
        let from = Mode::from_index(i).map(|m| m.to_string()).unwrap_or_default();
        matrix.push_str(&from);
        for v in row {
            matrix.push_str(&format!(",{}", format_float(*v)));
        }
        matrix.push('\n');
    }
    std::fs::write(dir.join("shift_matrix.csv"), matrix)?;
    Ok(())
}
