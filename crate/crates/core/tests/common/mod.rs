#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use vb_score::gain::RankedRun;
use vb_score::io::{read_queries, read_runs, Query};

pub const K: usize = 5;

/// Which candidate indices each ambiguous query's run covers, by `q % 5`.
const COVERAGE: [&[usize]; 5] = [&[0, 1], &[0, 2], &[0, 1, 2], &[0, 3], &[0]];

pub fn entity_name(q: usize, i: usize) -> String {
    format!("Entity{q}x{i} Person")
}

fn query_line(q: usize, n: usize, scores: &[f64]) -> Value {
    let candidates: Vec<Value> = (0..n)
        .map(|i| {
            json!({
                "entity_id": format!("E{q}-{i}"),
                "surface_name": entity_name(q, i),
                "score": scores[i],
            })
        })
        .collect();
    json!({"query_id": format!("q{q:03}"), "text": format!("person {q}"), "candidates": candidates})
}

fn run_line(q: usize, titles: &[String]) -> Value {
    let items: Vec<Value> = titles
        .iter()
        .enumerate()
        .map(|(j, t)| json!({"doc_id": format!("q{q}-d{}", j + 1), "rank": j + 1, "title": t, "snippet": ""}))
        .collect();
    json!({"query_id": format!("q{q:03}"), "cutoff_k": K, "items": items})
}

/// Four candidates per query, partial coverage; ES lands roughly in [0.55, 0.95].
pub fn ambiguous_collection(n_queries: usize) -> (Vec<Value>, Vec<Value>) {
    let mut queries = Vec::new();
    let mut runs = Vec::new();
    for q in 0..n_queries {
        let shift = (q % 7) as f64 * 0.1;
        queries.push(query_line(q, 4, &[2.0 + shift, 1.0, 0.5, 0.0]));
        let covered = COVERAGE[q % COVERAGE.len()];
        let titles: Vec<String> = (0..K)
            .map(|j| match covered.get(j) {
                Some(&i) => entity_name(q, i),
                None => format!("unrelated filler page {j}"),
            })
            .collect();
        runs.push(run_line(q, &titles));
    }
    (queries, runs)
}

/// Every candidate is named by one of the top results.
pub fn full_coverage_collection(n_queries: usize) -> (Vec<Value>, Vec<Value>) {
    let mut queries = Vec::new();
    let mut runs = Vec::new();
    for q in 0..n_queries {
        queries.push(query_line(q, 3, &[1.5, 1.0, 0.2]));
        runs.push(run_line(q, &(0..3).map(|i| entity_name(q, i)).collect::<Vec<_>>()));
    }
    (queries, runs)
}

pub fn jsonl(lines: &[Value]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

pub fn write_jsonl(dir: &Path, name: &str, lines: &[Value]) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, jsonl(lines)).unwrap();
    p
}

pub fn load(queries: &[Value], runs: &[Value]) -> (Vec<Query>, Vec<RankedRun>) {
    (
        read_queries(jsonl(queries).as_bytes()).unwrap(),
        read_runs(jsonl(runs).as_bytes()).unwrap(),
    )
}

pub fn vb_bin() -> &'static str {
    env!("CARGO_BIN_EXE_vb")
}
