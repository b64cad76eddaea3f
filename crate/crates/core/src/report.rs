//! Report schemas, CSV plot data and atomic file output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VbError};
use crate::uncertainty::{CollectionReport, ConfidenceInterval, PairedTTest};

/// Major.minor; readers accept any minor of the same major.
pub const SCHEMA_VERSION: &str = "1.0";

pub fn check_schema_version(version: &str) -> Result<()> {
    let major = |v: &str| v.split('.').next().map(str::to_owned);
    if major(version).is_none() || major(version) != major(SCHEMA_VERSION) {
        return Err(VbError::UnsupportedSchema(version.to_string()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRow {
    pub replica_index: usize,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intents: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub es: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vb_raw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalSet {
    pub vb_percentile: ConfidenceInterval,
    pub vb_normal: ConfidenceInterval,
    pub es_percentile: ConfidenceInterval,
    pub es_normal: ConfidenceInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub vb_hat: f64,
    pub vb_raw_hat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEstimate {
    pub es_hat: f64,
    pub sigma_es: f64,
    pub vb_hat: f64,
    pub sigma_vb: f64,
    /// Headline interval: replica VB samples, configured method.
    pub ci: ConfidenceInterval,
    pub intervals: IntervalSet,
    pub replicas_ok: usize,
    pub replicas_failed: usize,
    /// Replicas whose raw VB was negative and clamped to 0.
    pub replicas_clamped: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha_sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub query_id: String,
    pub k: usize,
    /// Present when at least one replica succeeded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<QueryEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub replicas: Vec<ReplicaRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryReportFile {
    pub schema_version: String,
    pub queries: Vec<QueryReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroSweepPoint {
    pub alpha: f64,
    pub macro_vb: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub schema_version: String,
    #[serde(flatten)]
    pub collection: CollectionReport,
    pub failed_queries: Vec<String>,
    pub excluded_replicas: usize,
    pub clamped_replicas: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha_sweep: Vec<MacroSweepPoint>,
}

impl ScoreReport {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| VbError::UnsupportedSchema("<missing>".into()))?;
        check_schema_version(version)?;
        Ok(serde_json::from_value(value)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDelta {
    pub es_a: f64,
    pub es_b: f64,
    pub es_delta: f64,
    pub vb_a: f64,
    pub vb_b: f64,
    pub vb_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema_version: String,
    pub config: serde_json::Value,
    pub per_query: BTreeMap<String, QueryDelta>,
    pub macro_es_delta: f64,
    pub macro_vb_delta: f64,
    /// Paired bootstrap (query resampling) of the mean VB delta.
    pub vb_delta_ci: ConfidenceInterval,
    pub es_delta_ci: ConfidenceInterval,
    pub vb_t_test: PairedTTest,
    pub es_t_test: PairedTTest,
    /// Queries where either run failed to produce an estimate.
    pub excluded_queries: Vec<String>,
}

impl ComparisonReport {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_str())
            .ok_or_else(|| VbError::UnsupportedSchema("<missing>".into()))?;
        check_schema_version(version)?;
        Ok(serde_json::from_value(value)?)
    }
}

pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `query_id,es_hat,vb_hat,ci_lower,ci_upper` for every estimated query.
pub fn vb_vs_es_csv(queries: &[QueryReport]) -> String {
    let mut out = String::from("query_id,es_hat,vb_hat,ci_lower,ci_upper\n");
    for q in queries {
        if let Some(e) = &q.estimate {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                csv_field(&q.query_id),
                e.es_hat,
                e.vb_hat,
                e.ci.lower,
                e.ci.upper
            );
        }
    }
    out
}

/// Label used for collection-level rows in the sweep CSV.
pub const MACRO_ROW: &str = "__macro__";

/// `query_id,alpha,vb_hat,vb_raw_hat`; collection rows use [`MACRO_ROW`] and
/// leave `vb_raw_hat` empty.
pub fn alpha_sweep_csv(queries: &[QueryReport], report: Option<&ScoreReport>) -> String {
    let mut out = String::from("query_id,alpha,vb_hat,vb_raw_hat\n");
    for q in queries {
        if let Some(e) = &q.estimate {
            for p in &e.alpha_sweep {
                let _ = writeln!(
                    out,
                    "{},{},{},{}",
                    csv_field(&q.query_id),
                    p.alpha,
                    p.vb_hat,
                    p.vb_raw_hat
                );
            }
        }
    }
    if let Some(r) = report {
        for p in &r.alpha_sweep {
            let _ = writeln!(out, "{MACRO_ROW},{},{},", p.alpha, p.macro_vb);
        }
    }
    out
}

pub fn deltas_csv(report: &ComparisonReport) -> String {
    let mut out = String::from("query_id,es_a,es_b,es_delta,vb_a,vb_b,vb_delta\n");
    for (id, d) in &report.per_query {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            csv_field(id),
            d.es_a,
            d.es_b,
            d.es_delta,
            d.vb_a,
            d.vb_b,
            d.vb_delta
        );
    }
    out
}

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| VbError::Io(e.error))?;
    Ok(())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_versions() {
        assert!(check_schema_version("1.0").is_ok());
        assert!(check_schema_version("1.7").is_ok());
        assert!(matches!(check_schema_version("2.0"), Err(VbError::UnsupportedSchema(_))));
        assert!(check_schema_version("").is_err());
        assert!(ScoreReport::from_json(r#"{"schema_version":"9.1"}"#).is_err());
        assert!(ScoreReport::from_json(r#"{"macro_vb":1}"#).is_err());
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("plain"), "plain");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
    }
}
