//! Data ingestion and emission: dataset bundles, synthetic fixtures,
//! route-cache ingestion, run configuration, and report output.

pub mod bundle;
pub mod config;
pub mod fixture;
pub mod report;
pub mod route_cache;

pub use bundle::{load_bundle, save_bundle, DatasetBundle};
pub use config::{config_digest, GridSpec, RunConfig, ScenarioSpec};
pub use fixture::{gen_fixture, read_manifest, FixtureManifest, FixtureSpec, DEFAULT_TRUE_PARAMS};
pub use report::{
    emit_report_csv, emit_report_json, load_report, validate_report_json, Report, REPORT_SCHEMA,
};
pub use route_cache::{ingest_route_cache, RouteCacheFragment};

/// Canonical float formatting for CSV and JSON artifacts: shortest
/// round-trip decimal, integers without a trailing ".0", infinities as
/// "inf"/"-inf".
pub(crate) fn format_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_owned()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_owned()
    } else {
        let mut s = format!("{v:?}");
        if s.ends_with(".0") {
            s.truncate(s.len() - 2);
        }
        s
    }
}

/// Parse a float written by [`format_float`]; `None` on malformed input
/// (NaN is rejected).
pub(crate) fn parse_float(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok().filter(|v: &f64| !v.is_nan()),
    }
}
