//! Route-cache ingestion: pooling repeated time/cost/distance retrievals
//! per origin-destination-mode route into attribute-table fragments.
//! Inputs are assumed pre-filtered to the commute hours of interest.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Deserialize;

use crate::error::Result;
use crate::types::{Mode, ModeAttributes};

const SECONDS_PER_HOUR: f64 = 3600.0;

/// One cached retrieval of a route.
#[derive(Debug, Clone, Copy, Deserialize)]
struct Observation {
    duration_seconds: f64,
    cost: f64,
    distance_miles: f64,
}

/// One cache document: a route plus its repeated observations.
#[derive(Debug, Deserialize)]
struct RouteDoc {
    origin: String,
    destination: String,
    mode: String,
    observations: Vec<Observation>,
}

/// Pooled attribute rows recovered from a route cache, keyed by
/// (origin, destination, mode), plus a record of what was skipped.
#[derive(Debug, Clone, Default)]
pub struct RouteCacheFragment {
    pub rows: BTreeMap<(String, String, Mode), ModeAttributes>,
    /// One message per skipped document or anomaly, in scan order.
    pub warnings: Vec<String>,
}

impl RouteCacheFragment {
    pub fn skipped(&self) -> usize {
        self.warnings.len()
    }
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

fn doc_problem(doc: &RouteDoc) -> Option<String> {
    if doc.mode.parse::<Mode>().is_err() {
        return Some(format!("unknown mode '{}'", doc.mode));
    }
    for (i, obs) in doc.observations.iter().enumerate() {
        for (name, v) in [
            ("duration_seconds", obs.duration_seconds),
            ("cost", obs.cost),
            ("distance_miles", obs.distance_miles),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Some(format!("observation {i}: bad {name} {v}"));
            }
        }
    }
    None
}

/// Ingest a directory of JSON route documents, pooling observations for
/// the same route across documents ("several occasions") and reducing to
/// mean and sample standard deviation in hours, dollars, and miles.
/// Malformed documents are skipped with a warning; routes with zero
/// observations are omitted.
pub fn ingest_route_cache(dir: &Path) -> Result<RouteCacheFragment> {
    let mut fragment = RouteCacheFragment::default();
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|ext| ext == "json"))
        .collect();
    paths.sort();

    let mut pooled: BTreeMap<(String, String, Mode), Vec<Observation>> = BTreeMap::new();
    for path in &paths {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let doc: RouteDoc = match std::fs::read_to_string(path)
            .map_err(|e| e.to_string())
            .and_then(|text| serde_json::from_str(&text).map_err(|e| e.to_string()))
        {
            Ok(doc) => doc,
            Err(e) => {
                fragment.warnings.push(format!("{name}: skipped ({e})"));
                continue;
            }
        };
        if let Some(problem) = doc_problem(&doc) {
            fragment.warnings.push(format!("{name}: skipped ({problem})"));
            continue;
        }
        if doc.observations.is_empty() {
            fragment
                .warnings
                .push(format!("{name}: no observations, route omitted"));
            continue;
        }
        let mode: Mode = doc.mode.parse().expect("checked by doc_problem");
        pooled
            .entry((doc.origin, doc.destination, mode))
            .or_default()
            .extend(doc.observations);
    }

    for (key, obs) in pooled {
        let durations: Vec<f64> = obs.iter().map(|o| o.duration_seconds).collect();
        let costs: Vec<f64> = obs.iter().map(|o| o.cost).collect();
        let distances: Vec<f64> = obs.iter().map(|o| o.distance_miles).collect();
        let (time_mean_s, time_std_s) = mean_and_sample_std(&durations);
        let (cost_mean_usd, cost_std_usd) = mean_and_sample_std(&costs);
        let (distance_miles, _) = mean_and_sample_std(&distances);
        fragment.rows.insert(
            key,
            ModeAttributes {
                time_mean_hr: time_mean_s / SECONDS_PER_HOUR,
                time_std_hr: time_std_s / SECONDS_PER_HOUR,
                cost_mean_usd,
                cost_std_usd,
                distance_miles,
            },
        );
    }

    if fragment.rows.is_empty() {
        fragment.warnings.push("cache yielded no routes".to_owned());
    }
    Ok(fragment)
}
