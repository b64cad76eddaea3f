//! JSONL input formats: queries, runs and alternate candidate sets.
//!
//! Query line:
//! ```json
//! {"query_id": "q1", "text": "smith ehr",
//!  "candidates": [{"entity_id": "E1", "surface_name": "John Smith", "aliases": [], "attributes": {"field": "EHR"}, "score": 1.2}],
//!  "constraints": [{"constraint_id": "c1", "op": "equals", "attribute": "field", "value": "EHR", "weight": 1.0}],
//!  "paraphrase_variant_refs": ["q1-alt"]}
//! ```
//!
//! Run line (`cutoff_k` defaults to the list length, minimum 1):
//! ```json
//! {"query_id": "q1", "cutoff_k": 10, "items": [{"doc_id": "d1", "rank": 1, "title": "...", "snippet": "...", "url": null}]}
//! ```
//!
//! Variant line: `{"variant_id": "q1-alt", "candidates": [...]}`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VbError};
use crate::gain::{RankedRun, ResultItem};
use crate::intent::{Constraint, ScoredCandidate};
use crate::replica::VariantStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    #[serde(default)]
    pub text: String,
    pub candidates: Vec<ScoredCandidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<Constraint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub paraphrase_variant_refs: Vec<String>,
}

impl Query {
    pub fn validate(&self) -> Result<()> {
        if self.query_id.is_empty() {
            return Err(VbError::Validation("query_id must be nonempty".into()));
        }
        if self.candidates.is_empty() {
            return Err(VbError::Validation(format!(
                "query {} has no candidates",
                self.query_id
            )));
        }
        for c in &self.candidates {
            c.entity
                .validate()
                .and_then(|_| {
                    c.raw_score
                        .is_finite()
                        .then_some(())
                        .ok_or_else(|| VbError::invalid("non-finite score"))
                })
                .map_err(|e| VbError::Validation(format!("query {}: {e}", self.query_id)))?;
        }
        for c in &self.constraints {
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(VbError::Validation(format!(
                    "query {}: constraint {} has invalid weight {}",
                    self.query_id, c.constraint_id, c.weight
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Deserialize)]
struct RunLine {
    query_id: String,
    #[serde(default)]
    cutoff_k: Option<usize>,
    #[serde(default)]
    items: Vec<ResultItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateVariant {
    pub variant_id: String,
    pub candidates: Vec<ScoredCandidate>,
}

fn with_line(line: usize, e: VbError) -> VbError {
    match e {
        VbError::Validation(m) | VbError::InvalidInput(m) => VbError::Validation(format!("line {line}: {m}")),
        other => other,
    }
}

/// Parses nonblank lines, attaching 1-based line numbers to every error.
fn parse_jsonl<T, R>(reader: R, mut check: impl FnMut(&T) -> Result<()>) -> Result<Vec<(usize, T)>>
where
    T: DeserializeOwned,
    R: Read,
{
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| VbError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        check(&value).map_err(|e| with_line(line_no, e))?;
        out.push((line_no, value));
    }
    Ok(out)
}

pub fn read_queries<R: Read>(reader: R) -> Result<Vec<Query>> {
    let mut seen = BTreeSet::new();
    let parsed = parse_jsonl(reader, |q: &Query| {
        q.validate()?;
        if !seen.insert(q.query_id.clone()) {
            return Err(VbError::Validation(format!("duplicate query_id {}", q.query_id)));
        }
        Ok(())
    })?;
    Ok(parsed.into_iter().map(|(_, q)| q).collect())
}

pub fn parse_queries(path: &Path) -> Result<Vec<Query>> {
    read_queries(File::open(path)?)
}

pub fn read_runs<R: Read>(reader: R) -> Result<Vec<RankedRun>> {
    let mut seen = BTreeSet::new();
    let mut runs = Vec::new();
    for (line, r) in parse_jsonl(reader, |_: &RunLine| Ok(()))? {
        let cutoff_k = r.cutoff_k.unwrap_or(r.items.len()).max(1);
        let run = RankedRun {
            query_id: r.query_id,
            items: r.items,
            cutoff_k,
        };
        run.validate().map_err(|e| with_line(line, e))?;
        if !seen.insert(run.query_id.clone()) {
            return Err(VbError::Validation(format!(
                "line {line}: duplicate run for query {}",
                run.query_id
            )));
        }
        runs.push(run);
    }
    Ok(runs)
}

pub fn parse_run(path: &Path) -> Result<Vec<RankedRun>> {
    read_runs(File::open(path)?)
}

pub fn read_variants<R: Read>(reader: R, store: &mut VariantStore) -> Result<()> {
    for (line, v) in parse_jsonl(reader, |v: &CandidateVariant| {
        if v.candidates.is_empty() {
            return Err(VbError::Validation(format!("variant {} has no candidates", v.variant_id)));
        }
        Ok(())
    })? {
        if store.insert(v.variant_id.clone(), v.candidates).is_some() {
            return Err(VbError::Validation(format!(
                "line {line}: duplicate variant id {}",
                v.variant_id
            )));
        }
    }
    Ok(())
}

pub fn parse_variants(paths: &[impl AsRef<Path>]) -> Result<VariantStore> {
    let mut store = VariantStore::new();
    for p in paths {
        read_variants(File::open(p.as_ref())?, &mut store)?;
    }
    Ok(store)
}

/// Reads a JSON object mapping strings to strings (alias or canonical-id tables).
pub fn parse_string_map(path: &Path) -> Result<BTreeMap<String, String>> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Pairs every query with its run. Runs for unknown queries and queries
/// without a run are validation errors.
pub fn join_runs<'a>(
    queries: &'a [Query],
    runs: &'a [RankedRun],
) -> Result<Vec<(&'a Query, &'a RankedRun)>> {
    let by_id: BTreeMap<&str, &RankedRun> = runs.iter().map(|r| (r.query_id.as_str(), r)).collect();
    let known: BTreeSet<&str> = queries.iter().map(|q| q.query_id.as_str()).collect();
    let unknown: Vec<&str> = by_id.keys().copied().filter(|id| !known.contains(id)).collect();
    if !unknown.is_empty() {
        return Err(VbError::Validation(format!(
            "run contains unknown query ids: {}",
            unknown.join(", ")
        )));
    }
    let missing: Vec<&str> = known.iter().copied().filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(VbError::Validation(format!(
            "run is missing query ids: {}",
            missing.join(", ")
        )));
    }
    Ok(queries.iter().map(|q| (q, by_id[q.query_id.as_str()])).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"query_id":"q1","text":"smith","candidates":[{"entity_id":"E1","surface_name":"John Smith","score":0.5}]}"#;

    #[test]
    fn minimal_query() {
        let qs = read_queries(MINIMAL.as_bytes()).unwrap();
        assert_eq!(qs.len(), 1);
        assert_eq!(qs[0].candidates[0].entity.entity_id, "E1");
        assert_eq!(qs[0].candidates[0].raw_score, 0.5);
    }

    #[test]
    fn missing_query_id_names_line() {
        let text = format!("{MINIMAL}\n\n{}", r#"{"text":"x","candidates":[]}"#);
        match read_queries(text.as_bytes()) {
            Err(VbError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("query_id"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_names_line() {
        let text = format!("{MINIMAL}\n{{not json");
        assert!(matches!(read_queries(text.as_bytes()), Err(VbError::Parse { line: 2, .. })));
    }

    #[test]
    fn duplicate_and_empty_queries_rejected() {
        let text = format!("{MINIMAL}\n{MINIMAL}");
        match read_queries(text.as_bytes()) {
            Err(VbError::Validation(m)) => assert!(m.starts_with("line 2:"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
        let empty = r#"{"query_id":"q","candidates":[]}"#;
        assert!(matches!(read_queries(empty.as_bytes()), Err(VbError::Validation(_))));
    }

    #[test]
    fn query_round_trip() {
        let text = r#"{"query_id":"q1","text":"t","candidates":[{"entity_id":"E1","surface_name":"A","aliases":["a1"],"attributes":{"k":"v"},"score":1.5}],"constraints":[{"constraint_id":"c","op":"one_of","attribute":"k","values":["v","w"],"weight":0.5}],"paraphrase_variant_refs":["alt"]}"#;
        let qs = read_queries(text.as_bytes()).unwrap();
        let again = serde_json::to_string(&qs[0]).unwrap();
        let qs2 = read_queries(again.as_bytes()).unwrap();
        assert_eq!(qs, qs2);
    }

    #[test]
    fn run_parsing() {
        let ok = r#"{"query_id":"q","items":[{"doc_id":"a","rank":1},{"doc_id":"b","rank":2},{"doc_id":"c","rank":3}]}"#;
        let runs = read_runs(ok.as_bytes()).unwrap();
        assert_eq!(runs[0].cutoff_k, 3);
        let gap = r#"{"query_id":"q","items":[{"doc_id":"a","rank":1},{"doc_id":"c","rank":3}]}"#;
        assert!(matches!(read_runs(gap.as_bytes()), Err(VbError::Validation(_))));
        let empty = r#"{"query_id":"q","cutoff_k":5,"items":[]}"#;
        let runs = read_runs(empty.as_bytes()).unwrap();
        assert_eq!(runs[0].cutoff_k, 5);
        assert!(runs[0].items.is_empty());
    }

    #[test]
    fn join_reports_mismatches() {
        let qs = read_queries(MINIMAL.as_bytes()).unwrap();
        let runs = read_runs(r#"{"query_id":"zz","items":[]}"#.as_bytes()).unwrap();
        let err = join_runs(&qs, &runs).unwrap_err().to_string();
        assert!(err.contains("zz"));
        let ok = read_runs(r#"{"query_id":"q1","items":[]}"#.as_bytes()).unwrap();
        assert_eq!(join_runs(&qs, &ok).unwrap().len(), 1);
        assert!(join_runs(&qs, &[]).unwrap_err().to_string().contains("q1"));
    }

    #[test]
    fn variants() {
        let mut store = VariantStore::new();
        let text = r#"{"variant_id":"alt","candidates":[{"entity_id":"E2","surface_name":"B","score":0}]}"#;
        read_variants(text.as_bytes(), &mut store).unwrap();
        assert_eq!(store["alt"].len(), 1);
        assert!(read_variants(text.as_bytes(), &mut store).is_err());
    }
}
