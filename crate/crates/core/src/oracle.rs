//! Synthetic worlds with known ground truth, and empirical checks of the
//! metric's guarantees: range, monotonicity, stability, Monte Carlo
//! concentration, replica aggregation ordering and oracle equivalence.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VbError};
use crate::gain::{compute_gains, EntityAssignment, GainMode, GainVector, IntentGain, RankedRun, ResultItem};
use crate::intent::{CandidateEntity, IntentDistribution, Provenance};
use crate::metric::{expected_success, vb_score, ALPHA_GRID};
use crate::replica::keyed_rng;
use crate::report::SCHEMA_VERSION;

/// Sample from the symmetric Dirichlet(1), i.e. uniform on the simplex.
pub fn dirichlet_uniform<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 {
        draws.into_iter().map(|x| x / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub query_id: String,
    pub dist: IntentDistribution,
    /// `relevance[i][j]`: result at rank `j + 1` is about entity `i`.
    pub relevance: Vec<Vec<bool>>,
    pub planted_run: RankedRun,
}

impl SyntheticQuery {
    /// One assignment per relevant (entity, rank) pair.
    pub fn assignments(&self) -> Vec<EntityAssignment> {
        let mut out = Vec::new();
        for (i, row) in self.relevance.iter().enumerate() {
            for (j, &rel) in row.iter().enumerate() {
                if rel {
                    out.push(EntityAssignment {
                        doc_id: self.planted_run.items[j].doc_id.clone(),
                        rank: j + 1,
                        assigned_entity_id: Some(self.dist.entries[i].entity.entity_id.clone()),
                        confidence: 1.0,
                    });
                }
            }
        }
        out.sort_by_key(|a| a.rank);
        out
    }

    pub fn gains(&self, k: usize, mode: GainMode) -> GainVector {
        compute_gains(&self.assignments(), &self.dist, k, mode)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub k: usize,
    pub queries: Vec<SyntheticQuery>,
}

pub fn generate_world(
    seed: u64,
    n_queries: usize,
    n_entities: usize,
    k: usize,
    coverage_prob: f64,
) -> Result<SyntheticWorld> {
    if n_entities == 0 || k == 0 {
        return Err(VbError::invalid("worlds need at least one entity and k >= 1"));
    }
    if !(0.0..=1.0).contains(&coverage_prob) {
        return Err(VbError::invalid(format!("coverage_prob must be in [0,1], got {coverage_prob}")));
    }
    let queries = (0..n_queries)
        .map(|q| {
            let mut rng = keyed_rng(seed, "world", q as u64);
            let masses = dirichlet_uniform(&mut rng, n_entities);
            let entities: Vec<CandidateEntity> = (0..n_entities)
                .map(|i| CandidateEntity::new(format!("q{q}-e{i}"), format!("Entity {q} {i}")))
                .collect();
            let relevance: Vec<Vec<bool>> = (0..n_entities)
                .map(|_| (0..k).map(|_| rng.random_bool(coverage_prob)).collect())
                .collect();
            let items = (0..k)
                .map(|j| ResultItem {
                    doc_id: format!("q{q}-d{}", j + 1),
                    rank: j + 1,
                    title: (0..n_entities)
                        .filter(|&i| relevance[i][j])
                        .map(|i| entities[i].surface_name.as_str())
                        .collect::<Vec<_>>()
                        .join(" / "),
                    snippet: String::new(),
                    url: None,
                })
                .collect();
            let dist = IntentDistribution {
                entries: entities
                    .into_iter()
                    .zip(masses)
                    .map(|(entity, probability)| crate::intent::IntentEntry { entity, probability })
                    .collect(),
                temperature_used: 1.0,
                provenance: Provenance::Softmax,
            };
            SyntheticQuery {
                query_id: format!("q{q}"),
                dist,
                relevance,
                planted_run: RankedRun {
                    query_id: format!("q{q}"),
                    items,
                    cutoff_k: k,
                },
            }
        })
        .collect();
    Ok(SyntheticWorld { seed, k, queries })
}

/// Enumerates intents and sums the mass of those covered within the top `k`.
pub fn brute_force_es(world: &SyntheticWorld, query_id: &str, k: usize) -> Result<f64> {
    let q = world
        .queries
        .iter()
        .find(|q| q.query_id == query_id)
        .ok_or_else(|| VbError::invalid(format!("unknown synthetic query {query_id:?}")))?;
    let depth = k.min(world.k);
    let mut total = 0.0;
    for (entry, row) in q.dist.entries.iter().zip(&q.relevance) {
        if row[..depth].iter().any(|&rel| rel) {
            total += entry.probability;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationCheck {
    pub replicas: usize,
    pub deviation: f64,
    /// Extra ceiling on the deviation frequency, on top of the Hoeffding bound.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_frequency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub trials: usize,
    pub seed: u64,
    pub alpha_values: Vec<f64>,
    pub concentration: Vec<ConcentrationCheck>,
    pub oracle_queries: usize,
    pub max_entities: usize,
    pub k: usize,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            trials: 10_000,
            seed: 7,
            alpha_values: ALPHA_GRID.to_vec(),
            concentration: vec![
                ConcentrationCheck {
                    replicas: 20,
                    deviation: 0.1,
                    max_frequency: Some(0.67),
                },
                ConcentrationCheck {
                    replicas: 50,
                    deviation: 0.05,
                    max_frequency: Some(0.37),
                },
            ],
            oracle_queries: 1000,
            max_entities: 8,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    pub passed: bool,
    /// Suite-specific statistic (see `detail`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub schema_version: String,
    pub config: ValidationConfig,
    pub suites: Vec<SuiteReport>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn suite(&self, name: &str) -> Option<&SuiteReport> {
        self.suites.iter().find(|s| s.name == name)
    }
}

/// Random distribution plus gains produced through the tagging/gain path.
/// `kind` 0 forces full coverage, 1 forces none.
fn random_case(rng: &mut ChaCha12Rng, max_entities: usize, k: usize, kind: usize) -> (IntentDistribution, GainVector, Vec<EntityAssignment>) {
    let n = rng.random_range(1..=max_entities);
    let dist = random_dist(rng, n);
    let mode = if rng.random_bool(0.5) { GainMode::Binary } else { GainMode::Dcg };
    let assignments: Vec<EntityAssignment> = match kind {
        0 => (0..n).map(|i| assign(&dist, i, 1)).collect(),
        1 => Vec::new(),
        _ => (1..=k)
            .filter_map(|rank| {
                let pick = rng.random_range(0..=n);
                (pick < n).then(|| assign(&dist, pick, rank))
            })
            .collect(),
    };
    let gains = compute_gains(&assignments, &dist, k, mode);
    (dist, gains, assignments)
}

fn random_dist(rng: &mut ChaCha12Rng, n: usize) -> IntentDistribution {
    let masses = dirichlet_uniform(rng, n);
    IntentDistribution {
        entries: masses
            .into_iter()
            .enumerate()
            .map(|(i, probability)| crate::intent::IntentEntry {
                entity: CandidateEntity::new(format!("e{i}"), ""),
                probability,
            })
            .collect(),
        temperature_used: 1.0,
        provenance: Provenance::Softmax,
    }
}

fn assign(dist: &IntentDistribution, i: usize, rank: usize) -> EntityAssignment {
    EntityAssignment {
        doc_id: format!("d{rank}"),
        rank,
        assigned_entity_id: Some(dist.entries[i].entity.entity_id.clone()),
        confidence: 1.0,
    }
}

fn suite(name: &str, trials: usize, failures: usize, observed: Option<f64>, bound: Option<f64>, detail: String) -> SuiteReport {
    SuiteReport {
        name: name.to_string(),
        trials,
        failures,
        passed: failures == 0,
        observed,
        bound,
        detail,
    }
}

fn range_suite(cfg: &ValidationConfig) -> Result<SuiteReport> {
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<(bool, f64, bool)> {
            let mut rng = keyed_rng(cfg.seed, "range", t as u64);
            let (dist, gains, _) = random_case(&mut rng, cfg.max_entities, cfg.k, t % 10);
            let es = expected_success(&dist, &gains)?;
            let mut ok = (0.0..=1.0).contains(&es);
            let mut worst_gap = f64::NEG_INFINITY;
            for &alpha in &cfg.alpha_values {
                let b = vb_score(es, alpha)?;
                worst_gap = worst_gap.max(b.vb_raw - es);
                ok &= (0.0..=1.0).contains(&b.vb) && b.vb_raw <= es;
                if es == 0.0 || es == 1.0 {
                    ok &= b.vb == es;
                }
            }
            Ok((ok, worst_gap, es == 0.0 || es == 1.0))
        })
        .collect::<Result<Vec<_>>>()?;
    let failures = outcomes.iter().filter(|o| !o.0).count();
    let gap = outcomes.iter().map(|o| o.1).fold(f64::NEG_INFINITY, f64::max);
    let degenerate = outcomes.iter().filter(|o| o.2).count();
    Ok(suite(
        "range",
        cfg.trials,
        failures,
        Some(gap),
        Some(0.0),
        format!("max(vb_raw - es) over trials and alphas; {degenerate} trials had es in {{0,1}}"),
    ))
}

fn zero_penalty_suite(cfg: &ValidationConfig) -> Result<SuiteReport> {
    let failures = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<bool> {
            let mut rng = keyed_rng(cfg.seed, "zero-penalty", t as u64);
            let (dist, gains, _) = random_case(&mut rng, cfg.max_entities, cfg.k, t % 10);
            let es = expected_success(&dist, &gains)?;
            let b = vb_score(es, 0.0)?;
            Ok(b.vb == es && b.vb_raw == es)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|ok| !ok)
        .count();
    Ok(suite("alpha_zero", cfg.trials, failures, None, None, "VB at alpha=0 equals ES".into()))
}

fn monotonicity_suite(cfg: &ValidationConfig) -> Result<SuiteReport> {
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<(bool, f64)> {
            let mut rng = keyed_rng(cfg.seed, "monotonicity", t as u64);
            let (dist, _, assignments) = random_case(&mut rng, cfg.max_entities, cfg.k, 2);
            let mode = if t % 2 == 0 { GainMode::Binary } else { GainMode::Dcg };
            let i = rng.random_range(0..dist.len());
            let id = dist.entries[i].entity.entity_id.clone();
            let mine = |a: &EntityAssignment| a.assigned_entity_id.as_deref() == Some(id.as_str());
            // baseline leaves room to improve entity i
            let baseline: Vec<EntityAssignment> = match mode {
                GainMode::Binary => assignments.iter().filter(|a| !mine(a)).cloned().collect(),
                GainMode::Dcg => assignments.iter().filter(|a| !(mine(a) && a.rank == 1)).cloned().collect(),
            };
            let best = baseline.iter().filter(|a| mine(a)).map(|a| a.rank).min().unwrap_or(cfg.k + 1);
            let new_rank = rng.random_range(1..best);
            let mut improved = baseline.clone();
            improved.push(assign(&dist, i, new_rank));

            let g0 = compute_gains(&baseline, &dist, cfg.k, mode);
            let g1 = compute_gains(&improved, &dist, cfg.k, mode);
            let dominated = g0.values().iter().zip(g1.values()).all(|(a, b)| b >= *a);
            let es0 = expected_success(&dist, &g0)?;
            let es1 = expected_success(&dist, &g1)?;
            Ok((dominated && es1 > es0 && dist.entries[i].probability > 0.0, es1 - es0))
        })
        .collect::<Result<Vec<_>>>()?;
    let failures = outcomes.iter().filter(|o| !o.0).count();
    let min_gain = outcomes.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
    Ok(suite(
        "monotonicity",
        cfg.trials,
        failures,
        Some(min_gain),
        Some(0.0),
        "min ES increase after improving one intent's gain (must be > 0)".into(),
    ))
}

fn stability_suite(cfg: &ValidationConfig) -> Result<SuiteReport> {
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<(bool, f64)> {
            let mut rng = keyed_rng(cfg.seed, "stability", t as u64);
            let n = rng.random_range(1..=cfg.max_entities);
            let p = random_dist(&mut rng, n);
            let other = dirichlet_uniform(&mut rng, n);
            // mix toward an independent draw; lambda = 1 gives unrelated pairs
            let lambda = if t % 4 == 0 { 1.0 } else { rng.random::<f64>() * 0.2 };
            let mut q = p.clone();
            for (e, o) in q.entries.iter_mut().zip(&other) {
                e.probability = (1.0 - lambda) * e.probability + lambda * o;
            }
            let gains = GainVector {
                per_intent: p
                    .entity_ids()
                    .map(|id| IntentGain {
                        entity_id: id.to_string(),
                        gain: if rng.random_bool(0.3) { rng.random_range(0..2) as f64 } else { rng.random() },
                    })
                    .collect(),
                mode: GainMode::Dcg,
            };
            let l1: f64 = p.entries.iter().zip(&q.entries).map(|(a, b)| (a.probability - b.probability).abs()).sum();
            let diff = (expected_success(&q, &gains)? - expected_success(&p, &gains)?).abs();
            let ratio = if l1 > 0.0 { diff / l1 } else { 0.0 };
            Ok((diff <= l1 + 1e-12, ratio))
        })
        .collect::<Result<Vec<_>>>()?;
    let failures = outcomes.iter().filter(|o| !o.0).count();
    let worst = outcomes.iter().map(|o| o.1).fold(0.0, f64::max);
    Ok(suite(
        "stability",
        cfg.trials,
        failures,
        Some(worst),
        Some(1.0),
        "max |ES(pi') - ES(pi)| / ||pi' - pi||_1 (Lipschitz constant 1)".into(),
    ))
}

/// Replica generator with known mean: each replica's ES is the coverage mass
/// under a fresh uniform draw from the simplex over 6 intents, 3 of them
/// covered, so `E[ES] = 3/6`.
fn concentration_suite(cfg: &ValidationConfig, check: &ConcentrationCheck) -> Result<SuiteReport> {
    const N: usize = 6;
    const TRUE_MEAN: f64 = 0.5;
    let name = format!("concentration_b{}_d{}", check.replicas, check.deviation);
    let gains = GainVector {
        per_intent: (0..N)
            .map(|i| IntentGain {
                entity_id: format!("e{i}"),
                gain: if i < N / 2 { 1.0 } else { 0.0 },
            })
            .collect(),
        mode: GainMode::Binary,
    };
    let exceed = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<bool> {
            let mut rng = keyed_rng(cfg.seed, &name, t as u64);
            let mut sum = 0.0;
            for _ in 0..check.replicas {
                sum += expected_success(&random_dist(&mut rng, N), &gains)?;
            }
            Ok((sum / check.replicas as f64 - TRUE_MEAN).abs() >= check.deviation)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|&x| x)
        .count();
    let freq = exceed as f64 / cfg.trials.max(1) as f64;
    let hoeffding = (2.0 * (-2.0 * check.replicas as f64 * check.deviation.powi(2)).exp()).min(1.0);
    let bound = check.max_frequency.map_or(hoeffding, |m| m.min(hoeffding));
    Ok(SuiteReport {
        name,
        trials: cfg.trials,
        failures: usize::from(freq > bound),
        passed: freq <= bound,
        observed: Some(freq),
        bound: Some(bound),
        detail: format!(
            "deviation frequency over {} repetitions; Hoeffding 2exp(-2B d^2) = {hoeffding:.4}{}",
            cfg.trials,
            check
                .max_frequency
                .map(|m| format!(", configured ceiling {m}"))
                .unwrap_or_default()
        ),
    })
}

fn jensen_suite(cfg: &ValidationConfig) -> Result<SuiteReport> {
    let outcomes = (0..cfg.trials)
        .into_par_iter()
        .map(|t| -> Result<(bool, f64)> {
            let mut rng = keyed_rng(cfg.seed, "jensen", t as u64);
            let b = rng.random_range(2..=30);
            let es: Vec<f64> = (0..b)
                .map(|_| match rng.random_range(0..4) {
                    0 => f64::from(rng.random_range(0..2)),
                    _ => rng.random(),
                })
                .collect();
            let mean_es = es.iter().sum::<f64>() / b as f64;
            let mut ok = true;
            let mut gap = f64::INFINITY;
            for &alpha in &cfg.alpha_values {
                let mean_vb = es
                    .iter()
                    .map(|&e| vb_score(e, alpha).map(|s| s.vb))
                    .sum::<Result<f64>>()?
                    / b as f64;
                let vb_of_mean = vb_score(mean_es.clamp(0.0, 1.0), alpha)?.vb;
                gap = gap.min(mean_vb - vb_of_mean);
                ok &= mean_vb >= vb_of_mean - 1e-12;
            }
            Ok((ok, gap))
        })
        .collect::<Result<Vec<_>>>()?;
    let failures = outcomes.iter().filter(|o| !o.0).count();
    let gap = outcomes.iter().map(|o| o.1).fold(f64::INFINITY, f64::min);
    Ok(suite(
        "jensen_aggregation",
        cfg.trials,
        failures,
        Some(gap),
        Some(0.0),
        "min(mean replica VB - VB of mean ES); clamped VB is convex in ES".into(),
    ))
}

fn oracle_suite(cfg: &ValidationConfig) -> Result<SuiteReport> {
    let mut worst = 0.0f64;
    let mut failures = 0;
    let mut checked = 0;
    // a few coverage levels, including the degenerate ones
    let levels = [0.0, 0.05, 0.2, 0.5, 1.0];
    for (li, &p) in levels.iter().enumerate() {
        let n = cfg.oracle_queries / levels.len() + usize::from(li < cfg.oracle_queries % levels.len());
        let world = generate_world(cfg.seed.wrapping_add(li as u64), n, cfg.max_entities, cfg.k, p)?;
        for q in &world.queries {
            for k in [1, cfg.k] {
                let direct = expected_success(&q.dist, &q.gains(k, GainMode::Binary))?;
                let brute = brute_force_es(&world, &q.query_id, k)?;
                let err = (direct - brute).abs();
                worst = worst.max(err);
                failures += usize::from(err > 1e-12);
            }
            checked += 1;
        }
    }
    Ok(suite(
        "oracle_equivalence",
        checked,
        failures,
        Some(worst),
        Some(1e-12),
        "max |expected_success - brute_force_es| at k=1 and k=max".into(),
    ))
}

pub fn validate_theorems(cfg: &ValidationConfig) -> Result<ValidationReport> {
    if cfg.trials == 0 {
        return Err(VbError::invalid("trials must be >= 1"));
    }
    if cfg.max_entities == 0 || cfg.k == 0 {
        return Err(VbError::invalid("max_entities and k must be >= 1"));
    }
    if cfg.alpha_values.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
        return Err(VbError::invalid("alpha values must be >= 0"));
    }
    let mut suites = vec![
        range_suite(cfg)?,
        zero_penalty_suite(cfg)?,
        monotonicity_suite(cfg)?,
        stability_suite(cfg)?,
    ];
    for check in &cfg.concentration {
        if check.replicas == 0 || check.deviation.is_nan() || check.deviation <= 0.0 {
            return Err(VbError::invalid("concentration checks need B >= 1 and deviation > 0"));
        }
        suites.push(concentration_suite(cfg, check)?);
    }
    suites.push(jensen_suite(cfg)?);
    suites.push(oracle_suite(cfg)?);
    let passed = suites.iter().all(|s| s.passed);
    Ok(ValidationReport {
        schema_version: SCHEMA_VERSION.to_string(),
        config: cfg.clone(),
        suites,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_extremes() {
        let full = generate_world(1, 5, 4, 3, 1.0).unwrap();
        for q in &full.queries {
            assert_eq!(expected_success(&q.dist, &q.gains(3, GainMode::Binary)).unwrap(), 1.0);
            assert!((brute_force_es(&full, &q.query_id, 3).unwrap() - 1.0).abs() < 1e-12);
        }
        let none = generate_world(1, 5, 4, 3, 0.0).unwrap();
        for q in &none.queries {
            assert_eq!(expected_success(&q.dist, &q.gains(3, GainMode::Binary)).unwrap(), 0.0);
        }
    }

    #[test]
    fn world_is_deterministic_and_normalized() {
        let a = generate_world(9, 10, 6, 4, 0.3).unwrap();
        let b = generate_world(9, 10, 6, 4, 0.3).unwrap();
        assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());
        for q in &a.queries {
            assert!((q.dist.total_mass() - 1.0).abs() < 1e-12);
            assert_eq!(q.relevance.len(), 6);
            assert!(q.relevance.iter().all(|r| r.len() == 4));
        }
        assert!(generate_world(1, 1, 0, 1, 0.5).is_err());
        assert!(generate_world(1, 1, 1, 1, 1.5).is_err());
    }

    fn hand_world(masses: &[f64], covered: &[bool]) -> SyntheticWorld {
        let mut w = generate_world(0, 1, masses.len(), 2, 0.0).unwrap();
        let q = &mut w.queries[0];
        for (i, (&m, &c)) in masses.iter().zip(covered).enumerate() {
            q.dist.entries[i].probability = m;
            q.relevance[i][1] = c;
        }
        w
    }

    #[test]
    fn brute_force_examples() {
        let w = hand_world(&[0.5, 0.5], &[true, false]);
        assert_eq!(brute_force_es(&w, "q0", 2).unwrap(), 0.5);
        // covered only at rank 2
        assert_eq!(brute_force_es(&w, "q0", 1).unwrap(), 0.0);
        let w = hand_world(&[0.2, 0.3, 0.5], &[true, true, true]);
        assert!((brute_force_es(&w, "q0", 2).unwrap() - 1.0).abs() < 1e-15);
        let w = hand_world(&[0.2, 0.3, 0.5], &[true, false, true]);
        assert!((brute_force_es(&w, "q0", 2).unwrap() - 0.7).abs() < 1e-15);
        assert!(brute_force_es(&w, "nope", 2).is_err());
    }

    #[test]
    fn small_validation_run_passes() {
        let cfg = ValidationConfig {
            trials: 300,
            oracle_queries: 50,
            ..ValidationConfig::default()
        };
        let report = validate_theorems(&cfg).unwrap();
        for s in &report.suites {
            assert!(s.passed, "{s:?}");
        }
        assert_eq!(report, validate_theorems(&cfg).unwrap());
    }
}
