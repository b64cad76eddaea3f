//! Monte Carlo replicas of the input-side pipeline.
//!
//! Each replica perturbs the query's candidates and constraints, rebuilds the
//! intent distribution, re-tags the (fixed) run and scores it. Replica `b` of
//! query `q` draws from its own ChaCha stream keyed by `(master_seed, q, b)`, so
//! results do not depend on scheduling.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;

use log::warn;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VbError};
use crate::gain::{compute_gains, tag_results, EntityAssignment, GainMode, GainVector, RankedRun};
use crate::intent::{
    build_intent_distribution, Constraint, IntentDistribution, ScoredCandidate, TruncationPolicy,
};
use crate::io::Query;
use crate::metric::{expected_success, vb_score, ScoreBreakdown, DEFAULT_ALPHA};
use crate::tagger::Tagger;

pub const DEFAULT_REPLICAS: usize = 20;

/// Alternate candidate sets keyed by variant id.
pub type VariantStore = BTreeMap<String, Vec<ScoredCandidate>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationSpec {
    /// Adds N(0, sigma^2) noise to every linker score.
    ScoreJitter { sigma: f64 },
    /// Multiplies every constraint weight by an independent lognormal factor.
    WeightRescale { log_sd: f64 },
    /// Drops each candidate except the top-scored one with probability `p`.
    CandidateDropout { p: f64 },
    /// Replaces the candidates with one of the query's alternate sets, chosen
    /// uniformly. Queries without alternates are left alone.
    ParaphraseVariants {
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        sources: Vec<PathBuf>,
    },
}

impl PerturbationSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbationSpec::ScoreJitter { sigma } if !(sigma.is_finite() && sigma >= 0.0) => {
                Err(VbError::invalid(format!("jitter sigma must be >= 0, got {sigma}")))
            }
            PerturbationSpec::WeightRescale { log_sd } if !(log_sd.is_finite() && log_sd >= 0.0) => {
                Err(VbError::invalid(format!("weight log-sd must be >= 0, got {log_sd}")))
            }
            PerturbationSpec::CandidateDropout { p } if !(0.0..1.0).contains(&p) => {
                Err(VbError::invalid(format!("dropout probability must be in [0,1), got {p}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaConfig {
    pub replicas: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub perturbations: Vec<PerturbationSpec>,
    pub alpha: f64,
    pub k: usize,
    pub gain_mode: GainMode,
    #[serde(default)]
    pub truncation: Option<TruncationPolicy>,
    pub temperature: f64,
    /// Entity id to canonical id, used for deduplication.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub canonical_ids: BTreeMap<String, String>,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        Self {
            replicas: DEFAULT_REPLICAS,
            master_seed: 0,
            perturbations: Vec::new(),
            alpha: DEFAULT_ALPHA,
            k: 10,
            gain_mode: GainMode::Binary,
            truncation: None,
            temperature: 1.0,
            canonical_ids: BTreeMap::new(),
        }
    }
}

impl ReplicaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(VbError::invalid("replica count must be >= 1"));
        }
        if self.k == 0 {
            return Err(VbError::invalid("k must be >= 1"));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(VbError::invalid(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(VbError::invalid("temperature must be positive"));
        }
        if let Some(t) = &self.truncation {
            t.validate()?;
        }
        self.perturbations.iter().try_for_each(PerturbationSpec::validate)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "snake_case")]
pub enum ReplicaStatus {
    Ok,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaScore {
    pub dist: IntentDistribution,
    pub gains: GainVector,
    pub es: f64,
    pub vb: ScoreBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaResult {
    pub replica_index: usize,
    pub status: ReplicaStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ReplicaScore>,
}

impl ReplicaResult {
    pub fn is_ok(&self) -> bool {
        self.status == ReplicaStatus::Ok
    }
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// RNG keyed by `(master seed, key, counter)`: the key picks the seed and the
/// counter picks the ChaCha stream.
pub fn keyed_rng(master_seed: u64, key: &str, counter: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(master_seed ^ splitmix64(stable_hash(key))));
    rng.set_stream(counter);
    rng
}

pub fn replica_rng(master_seed: u64, query_id: &str, replica_index: usize) -> ChaCha12Rng {
    keyed_rng(master_seed, query_id, replica_index as u64)
}

struct ReplicaInput {
    candidates: Vec<ScoredCandidate>,
    constraints: Vec<Constraint>,
}

fn top_candidate(candidates: &[ScoredCandidate]) -> usize {
    (0..candidates.len())
        .min_by(|&a, &b| {
            candidates[b]
                .raw_score
                .total_cmp(&candidates[a].raw_score)
                .then_with(|| candidates[a].entity.entity_id.cmp(&candidates[b].entity.entity_id))
        })
        .unwrap_or(0)
}

pub struct ReplicaEngine<'a> {
    config: &'a ReplicaConfig,
    tagger: &'a dyn Tagger,
    variants: Option<&'a VariantStore>,
}

impl<'a> ReplicaEngine<'a> {
    pub fn new(config: &'a ReplicaConfig, tagger: &'a dyn Tagger) -> Self {
        Self {
            config,
            tagger,
            variants: None,
        }
    }

    pub fn with_variants(mut self, variants: &'a VariantStore) -> Self {
        self.variants = Some(variants);
        self
    }

    fn perturb(&self, query: &Query, rng: &mut ChaCha12Rng) -> Result<ReplicaInput> {
        let mut input = ReplicaInput {
            candidates: query.candidates.clone(),
            constraints: query.constraints.clone(),
        };
        for p in &self.config.perturbations {
            match *p {
                PerturbationSpec::ScoreJitter { sigma } => {
                    let noise = Normal::new(0.0, sigma).map_err(|e| VbError::invalid(e.to_string()))?;
                    for c in &mut input.candidates {
                        c.raw_score += noise.sample(rng);
                    }
                }
                PerturbationSpec::WeightRescale { log_sd } => {
                    let noise = Normal::new(0.0, log_sd).map_err(|e| VbError::invalid(e.to_string()))?;
                    for c in &mut input.constraints {
                        c.weight *= noise.sample(rng).exp();
                    }
                }
                PerturbationSpec::CandidateDropout { p } => {
                    let top = top_candidate(&input.candidates);
                    let keep: Vec<bool> = (0..input.candidates.len())
                        .map(|i| i == top || !rng.random_bool(p))
                        .collect();
                    let mut it = keep.iter();
                    input.candidates.retain(|_| *it.next().unwrap());
                }
                PerturbationSpec::ParaphraseVariants { .. } => {
                    if let Some(variant) = query.paraphrase_variant_refs.choose(rng) {
                        let store = self.variants.ok_or_else(|| {
                            VbError::invalid("paraphrase variants requested but none loaded")
                        })?;
                        input.candidates = store
                            .get(variant)
                            .ok_or_else(|| {
                                VbError::invalid(format!("unknown paraphrase variant {variant:?}"))
                            })?
                            .clone();
                    }
                }
            }
        }
        Ok(input)
    }

    fn distribution(&self, candidates: &[ScoredCandidate], constraints: &[Constraint]) -> Result<IntentDistribution> {
        build_intent_distribution(
            candidates,
            constraints,
            self.config.temperature,
            &self.config.canonical_ids,
            self.config.truncation.as_ref(),
        )
    }

    /// Runs all replicas for one query. Failed replicas are kept with their
    /// reason; the call fails only if every replica failed.
    pub fn run(&self, query: &Query, run: &RankedRun) -> Result<Vec<ReplicaResult>> {
        self.config.validate()?;
        let paraphrasing = self
            .config
            .perturbations
            .iter()
            .any(|p| matches!(p, PerturbationSpec::ParaphraseVariants { .. }));
        // refs are only resolved when paraphrase perturbation is enabled
        for variant in query.paraphrase_variant_refs.iter().filter(|_| paraphrasing) {
            if !self.variants.is_some_and(|v| v.contains_key(variant)) {
                return Err(VbError::invalid(format!(
                    "query {}: unknown paraphrase variant {variant:?}",
                    query.query_id
                )));
            }
        }
        let baseline = self.distribution(&query.candidates, &query.constraints)?;
        let baseline_tags: OnceLock<std::result::Result<Vec<EntityAssignment>, String>> = OnceLock::new();

        let one = |b: usize| -> ReplicaResult {
            let outcome = (|| -> Result<ReplicaScore> {
                let mut rng = replica_rng(self.config.master_seed, &query.query_id, b);
                let input = self.perturb(query, &mut rng)?;
                let dist = self.distribution(&input.candidates, &input.constraints)?;
                let same_support = dist.len() == baseline.len()
                    && dist
                        .entries
                        .iter()
                        .zip(&baseline.entries)
                        .all(|(a, c)| a.entity == c.entity);
                let tags = if same_support {
                    baseline_tags
                        .get_or_init(|| {
                            tag_results(run, &baseline, self.tagger).map_err(|e| e.to_string())
                        })
                        .clone()
                        .map_err(VbError::TaggerUnavailable)?
                } else {
                    tag_results(run, &dist, self.tagger)?
                };
                let gains = compute_gains(&tags, &dist, self.config.k, self.config.gain_mode);
                let es = expected_success(&dist, &gains)?;
                let vb = vb_score(es, self.config.alpha)?.with_context(self.config.k, self.config.gain_mode);
                Ok(ReplicaScore { dist, gains, es, vb })
            })();
            match outcome {
                Ok(score) => ReplicaResult {
                    replica_index: b,
                    status: ReplicaStatus::Ok,
                    score: Some(score),
                },
                Err(e) => ReplicaResult {
                    replica_index: b,
                    status: ReplicaStatus::Failed(e.to_string()),
                    score: None,
                },
            }
        };

        let results: Vec<ReplicaResult> = if self.tagger.supports_concurrency() {
            (0..self.config.replicas).into_par_iter().map(one).collect()
        } else {
            (0..self.config.replicas).map(one).collect()
        };

        let failed = results.iter().filter(|r| !r.is_ok()).count();
        if failed == results.len() {
            let reason = match &results[0].status {
                ReplicaStatus::Failed(r) => r.clone(),
                ReplicaStatus::Ok => unreachable!(),
            };
            return Err(VbError::EstimationFailed(format!(
                "query {}: all {failed} replicas failed; first error: {reason}",
                query.query_id
            )));
        }
        if failed > 0 {
            warn!("query {}: {failed} of {} replicas failed", query.query_id, results.len());
        }
        Ok(results)
    }
}

pub fn run_replicas(
    query: &Query,
    run: &RankedRun,
    config: &ReplicaConfig,
    tagger: &dyn Tagger,
) -> Result<Vec<ReplicaResult>> {
    ReplicaEngine::new(config, tagger).run(query, run)
}

/// ES values of the successful replicas, in replica order.
pub fn es_samples(replicas: &[ReplicaResult]) -> Vec<f64> {
    replicas
        .iter()
        .filter_map(|r| r.score.as_ref().map(|s| s.es))
        .collect()
}

/// Clamped VB values of the successful replicas, recomputed at `alpha`.
pub fn vb_samples(replicas: &[ReplicaResult], alpha: f64) -> Result<Vec<f64>> {
    es_samples(replicas)
        .into_iter()
        .map(|es| vb_score(es, alpha).map(|b| b.vb))
        .collect()
}

/// Mean and sample (n - 1) standard deviation; the deviation is 0 for one sample.
pub fn mean_and_sd(samples: &[f64]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(VbError::EstimationFailed("no successful replicas".into()));
    }
    if samples.iter().all(|&x| x == samples[0]) {
        return Ok((samples[0], 0.0));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let ss: f64 = samples.iter().map(|x| (x - mean).powi(2)).sum();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

/// Mean replica ES and its sample standard deviation.
pub fn estimate_es(replicas: &[ReplicaResult]) -> Result<(f64, f64)> {
    mean_and_sd(&es_samples(replicas))
}

/// Mean of the per-replica clamped VB at `alpha`.
pub fn estimate_vb(replicas: &[ReplicaResult], alpha: f64) -> Result<f64> {
    mean_and_sd(&vb_samples(replicas, alpha)?).map(|(m, _)| m)
}
