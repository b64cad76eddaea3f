//! End-to-end scoring and paired comparison of runs over a query collection.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VbError};
use crate::gain::{GainMode, RankedRun};
use crate::intent::TruncationPolicy;
use crate::io::{join_runs, Query};
use crate::metric::{vb_score, ALPHA_GRID, DEFAULT_ALPHA};
use crate::replica::{
    es_samples, mean_and_sd, vb_samples, PerturbationSpec, ReplicaConfig, ReplicaEngine,
    ReplicaResult, VariantStore, DEFAULT_REPLICAS,
};
use crate::report::{
    alpha_sweep_csv, deltas_csv, to_json_bytes, vb_vs_es_csv, write_atomic, ComparisonReport,
    IntervalSet, MacroSweepPoint, QueryDelta, QueryEstimate, QueryReport, QueryReportFile,
    ReplicaRow, ScoreReport, SweepPoint, SCHEMA_VERSION,
};
use crate::tagger::{Tagger, TaggerSpec};
use crate::uncertainty::{
    bootstrap_means, collection_aggregate, normal_ci, paired_t_test, percentile_ci, CiMethod,
    QueryScore, DEFAULT_BOOT_RESAMPLES, DEFAULT_DELTA,
};

/// Fully resolved scoring configuration. Embedded verbatim in every report.
///
/// Execution-only settings (worker count, output paths) are deliberately
/// absent so that reports do not depend on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Cutoff override; `None` uses each run's `cutoff_k`.
    pub k: Option<usize>,
    pub alpha: f64,
    pub gain_mode: GainMode,
    pub truncation: Option<TruncationPolicy>,
    pub temperature: f64,
    pub replicas: usize,
    pub seed: u64,
    pub perturbations: Vec<PerturbationSpec>,
    pub delta: f64,
    pub ci_method: CiMethod,
    pub boot_resamples: usize,
    pub canonical_ids: BTreeMap<String, String>,
    pub tagger: TaggerSpec,
    pub ablate: bool,
    pub alpha_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            k: None,
            alpha: DEFAULT_ALPHA,
            gain_mode: GainMode::Binary,
            truncation: None,
            temperature: 1.0,
            replicas: DEFAULT_REPLICAS,
            seed: 0,
            perturbations: Vec::new(),
            delta: DEFAULT_DELTA,
            ci_method: CiMethod::Percentile,
            boot_resamples: DEFAULT_BOOT_RESAMPLES,
            canonical_ids: BTreeMap::new(),
            tagger: TaggerSpec::default(),
            ablate: false,
            alpha_grid: ALPHA_GRID.to_vec(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == Some(0) {
            return Err(VbError::invalid("k must be >= 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(VbError::invalid("delta must be in (0,1)"));
        }
        if self.boot_resamples == 0 {
            return Err(VbError::invalid("boot_resamples must be >= 1"));
        }
        if self.alpha_grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
            return Err(VbError::invalid("alpha grid values must be >= 0"));
        }
        self.tagger.validate()?;
        self.replica_config(1).validate()
    }

    pub fn replica_config(&self, k: usize) -> ReplicaConfig {
        ReplicaConfig {
            replicas: self.replicas,
            master_seed: self.seed,
            perturbations: self.perturbations.clone(),
            alpha: self.alpha,
            k,
            gain_mode: self.gain_mode,
            truncation: self.truncation,
            temperature: self.temperature,
            canonical_ids: self.canonical_ids.clone(),
        }
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutcome {
    pub queries: Vec<QueryReport>,
    /// `None` when no query produced an estimate.
    pub report: Option<ScoreReport>,
}

fn replica_rows(replicas: &[ReplicaResult]) -> Vec<ReplicaRow> {
    replicas
        .iter()
        .map(|r| match &r.score {
            Some(s) => ReplicaRow {
                replica_index: r.replica_index,
                ok: true,
                error: None,
                intents: Some(s.dist.len()),
                es: Some(s.es),
                vb_raw: Some(s.vb.vb_raw),
                vb: Some(s.vb.vb),
            },
            None => ReplicaRow {
                replica_index: r.replica_index,
                ok: false,
                error: match &r.status {
                    crate::replica::ReplicaStatus::Failed(e) => Some(e.clone()),
                    crate::replica::ReplicaStatus::Ok => None,
                },
                intents: None,
                es: None,
                vb_raw: None,
                vb: None,
            },
        })
        .collect()
}

/// Per-query estimates and intervals from a replica set.
pub fn estimate_query(replicas: &[ReplicaResult], config: &RunConfig) -> Result<QueryEstimate> {
    let es = es_samples(replicas);
    let vb = vb_samples(replicas, config.alpha)?;
    let (es_hat, sigma_es) = mean_and_sd(&es)?;
    let (vb_hat, sigma_vb) = mean_and_sd(&vb)?;
    let n = es.len();
    let intervals = IntervalSet {
        vb_percentile: percentile_ci(&vb, config.delta)?,
        vb_normal: normal_ci(vb_hat, sigma_vb, n, config.delta)?,
        es_percentile: percentile_ci(&es, config.delta)?,
        es_normal: normal_ci(es_hat, sigma_es, n, config.delta)?,
    };
    let ci = match config.ci_method {
        CiMethod::Percentile => intervals.vb_percentile,
        CiMethod::Normal => intervals.vb_normal,
    };
    let replicas_clamped = es
        .iter()
        .map(|&e| vb_score(e, config.alpha).map(|b| b.clamped()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&c| c)
        .count();
    let alpha_sweep = if config.ablate {
        config
            .alpha_grid
            .iter()
            .map(|&alpha| {
                let vb_hat = mean_and_sd(&vb_samples(replicas, alpha)?)?.0;
                let raw: Vec<f64> = es
                    .iter()
                    .map(|&e| vb_score(e, alpha).map(|b| b.vb_raw))
                    .collect::<Result<_>>()?;
                Ok(SweepPoint {
                    alpha,
                    vb_hat,
                    vb_raw_hat: mean_and_sd(&raw)?.0,
                })
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(QueryEstimate {
        es_hat,
        sigma_es,
        vb_hat,
        sigma_vb,
        ci,
        intervals,
        replicas_ok: n,
        replicas_failed: replicas.len() - n,
        replicas_clamped,
        alpha_sweep,
    })
}

fn score_one(
    query: &Query,
    run: &RankedRun,
    config: &RunConfig,
    tagger: &dyn Tagger,
    variants: &VariantStore,
) -> Result<QueryReport> {
    let k = config.k.unwrap_or(run.cutoff_k);
    let rc = config.replica_config(k);
    match ReplicaEngine::new(&rc, tagger).with_variants(variants).run(query, run) {
        Ok(replicas) => Ok(QueryReport {
            query_id: query.query_id.clone(),
            k,
            estimate: Some(estimate_query(&replicas, config)?),
            failure: None,
            replicas: replica_rows(&replicas),
        }),
        Err(VbError::EstimationFailed(reason)) => {
            log::warn!("query {}: {reason}", query.query_id);
            Ok(QueryReport {
                query_id: query.query_id.clone(),
                k,
                estimate: None,
                failure: Some(reason),
                replicas: Vec::new(),
            })
        }
        Err(e) => Err(e),
    }
}

/// Scores every query of the collection. Estimation failures are recorded per
/// query; data errors abort.
pub fn score_collection(
    queries: &[Query],
    runs: &[RankedRun],
    config: &RunConfig,
    tagger: &dyn Tagger,
    variants: &VariantStore,
) -> Result<ScoreOutcome> {
    config.validate()?;
    let pairs = join_runs(queries, runs)?;
    let reports: Vec<QueryReport> = if tagger.supports_concurrency() {
        pairs
            .par_iter()
            .map(|(q, r)| score_one(q, r, config, tagger, variants))
            .collect::<Result<_>>()?
    } else {
        pairs
            .iter()
            .map(|(q, r)| score_one(q, r, config, tagger, variants))
            .collect::<Result<_>>()?
    };

    let per_query: BTreeMap<String, QueryScore> = reports
        .iter()
        .filter_map(|q| {
            q.estimate.as_ref().map(|e| {
                (
                    q.query_id.clone(),
                    QueryScore {
                        es_hat: e.es_hat,
                        vb_hat: e.vb_hat,
                        ci: e.ci,
                    },
                )
            })
        })
        .collect();
    if per_query.is_empty() {
        return Ok(ScoreOutcome {
            queries: reports,
            report: None,
        });
    }
    let mut collection = collection_aggregate(&per_query, config.delta, config.boot_resamples, config.seed)?;
    collection.config_echo = config.echo();

    let alpha_sweep = if config.ablate {
        config
            .alpha_grid
            .iter()
            .enumerate()
            .map(|(i, &alpha)| {
                let vals: Vec<f64> = reports
                    .iter()
                    .filter_map(|q| q.estimate.as_ref().map(|e| e.alpha_sweep[i].vb_hat))
                    .collect();
                MacroSweepPoint {
                    alpha,
                    macro_vb: vals.iter().sum::<f64>() / vals.len() as f64,
                }
            })
            .collect()
    } else {
        Vec::new()
    };
    let report = ScoreReport {
        schema_version: SCHEMA_VERSION.to_string(),
        collection,
        failed_queries: reports
            .iter()
            .filter(|q| q.estimate.is_none())
            .map(|q| q.query_id.clone())
            .collect(),
        excluded_replicas: reports
            .iter()
            .filter_map(|q| q.estimate.as_ref().map(|e| e.replicas_failed))
            .sum(),
        clamped_replicas: reports
            .iter()
            .filter_map(|q| q.estimate.as_ref().map(|e| e.replicas_clamped))
            .sum(),
        alpha_sweep,
    };
    Ok(ScoreOutcome {
        queries: reports,
        report: Some(report),
    })
}

pub const QUERIES_FILE: &str = "queries.json";
pub const COLLECTION_FILE: &str = "collection.json";
pub const VB_VS_ES_FILE: &str = "vb_vs_es.csv";
pub const ALPHA_SWEEP_FILE: &str = "alpha_sweep.csv";
pub const COMPARISON_FILE: &str = "comparison.json";
pub const DELTAS_FILE: &str = "deltas.csv";

pub fn write_score_outputs(dir: &Path, outcome: &ScoreOutcome, config: &RunConfig) -> Result<()> {
    let file = QueryReportFile {
        schema_version: SCHEMA_VERSION.to_string(),
        queries: outcome.queries.clone(),
    };
    write_atomic(&dir.join(QUERIES_FILE), &to_json_bytes(&file)?)?;
    if let Some(report) = &outcome.report {
        write_atomic(&dir.join(COLLECTION_FILE), &to_json_bytes(report)?)?;
    }
    write_atomic(&dir.join(VB_VS_ES_FILE), vb_vs_es_csv(&outcome.queries).as_bytes())?;
    if config.ablate {
        write_atomic(
            &dir.join(ALPHA_SWEEP_FILE),
            alpha_sweep_csv(&outcome.queries, outcome.report.as_ref()).as_bytes(),
        )?;
    }
    Ok(())
}

/// Scores both runs with identical replica streams and compares them per query.
pub fn compare_runs(
    queries: &[Query],
    run_a: &[RankedRun],
    run_b: &[RankedRun],
    config: &RunConfig,
    tagger: &dyn Tagger,
    variants: &VariantStore,
) -> Result<ComparisonReport> {
    let ids = |runs: &[RankedRun]| -> BTreeSet<String> { runs.iter().map(|r| r.query_id.clone()).collect() };
    let (a_ids, b_ids) = (ids(run_a), ids(run_b));
    if a_ids != b_ids {
        let only_a: Vec<_> = a_ids.difference(&b_ids).cloned().collect();
        let only_b: Vec<_> = b_ids.difference(&a_ids).cloned().collect();
        return Err(VbError::Validation(format!(
            "runs cover different queries; missing from run B: [{}]; missing from run A: [{}]",
            only_a.join(", "),
            only_b.join(", ")
        )));
    }
    let a = score_collection(queries, run_a, config, tagger, variants)?;
    let b = score_collection(queries, run_b, config, tagger, variants)?;
    let b_by_id: BTreeMap<&str, &QueryReport> = b.queries.iter().map(|q| (q.query_id.as_str(), q)).collect();

    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    for qa in &a.queries {
        let qb = b_by_id[qa.query_id.as_str()];
        match (&qa.estimate, &qb.estimate) {
            (Some(ea), Some(eb)) => {
                per_query.insert(
                    qa.query_id.clone(),
                    QueryDelta {
                        es_a: ea.es_hat,
                        es_b: eb.es_hat,
                        es_delta: eb.es_hat - ea.es_hat,
                        vb_a: ea.vb_hat,
                        vb_b: eb.vb_hat,
                        vb_delta: eb.vb_hat - ea.vb_hat,
                    },
                );
            }
            _ => excluded.push(qa.query_id.clone()),
        }
    }
    if per_query.is_empty() {
        return Err(VbError::EstimationFailed(
            "no query has estimates for both runs".into(),
        ));
    }
    excluded.sort();
    let vb_d: Vec<f64> = per_query.values().map(|d| d.vb_delta).collect();
    let es_d: Vec<f64> = per_query.values().map(|d| d.es_delta).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(ComparisonReport {
        schema_version: SCHEMA_VERSION.to_string(),
        config: config.echo(),
        macro_es_delta: mean(&es_d),
        macro_vb_delta: mean(&vb_d),
        vb_delta_ci: percentile_ci(
            &bootstrap_means(&vb_d, config.boot_resamples, config.seed, "paired-vb"),
            config.delta,
        )?,
        es_delta_ci: percentile_ci(
            &bootstrap_means(&es_d, config.boot_resamples, config.seed, "paired-es"),
            config.delta,
        )?,
        vb_t_test: paired_t_test(&vb_d)?,
        es_t_test: paired_t_test(&es_d)?,
        per_query,
        excluded_queries: excluded,
    })
}

pub fn write_comparison_outputs(dir: &Path, report: &ComparisonReport) -> Result<()> {
    write_atomic(&dir.join(COMPARISON_FILE), &to_json_bytes(report)?)?;
    write_atomic(&dir.join(DELTAS_FILE), deltas_csv(report).as_bytes())
}
