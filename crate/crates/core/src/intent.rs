//! Distributions over the plausible interpretations of a query.
//!
//! A distribution is built from linker scores (temperature softmax), optionally
//! reweighted by constraint violations, then deduplicated and truncated. The
//! processing order is always dedup, then truncation, then renormalization.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, VbError};

/// Absolute tolerance on the total mass of a distribution.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntity {
    pub entity_id: String,
    #[serde(default)]
    pub surface_name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attributes: BTreeMap<String, String>,
}

impl CandidateEntity {
    pub fn new(entity_id: impl Into<String>, surface_name: impl Into<String>) -> Self {
        Self {
            entity_id: entity_id.into(),
            surface_name: surface_name.into(),
            aliases: Vec::new(),
            attributes: BTreeMap::new(),
        }
    }

    pub fn with_alias(mut self, alias: impl Into<String>) -> Self {
        self.aliases.push(alias.into());
        self
    }

    pub fn with_attribute(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes.insert(name.into(), value.into());
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.entity_id.trim().is_empty() {
            return Err(VbError::invalid("entity_id must be nonempty"));
        }
        let mut seen = BTreeSet::new();
        for alias in &self.aliases {
            if !seen.insert(normalize_text(alias)) {
                return Err(VbError::invalid(format!(
                    "entity {}: duplicate alias {alias:?}",
                    self.entity_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    #[serde(flatten)]
    pub entity: CandidateEntity,
    #[serde(rename = "score", default)]
    pub raw_score: f64,
}

impl ScoredCandidate {
    pub fn new(entity: CandidateEntity, raw_score: f64) -> Self {
        Self { entity, raw_score }
    }
}

/// Attribute test evaluated against [`CandidateEntity::attributes`].
///
/// Comparisons are case-insensitive and ignore surrounding whitespace. A
/// missing attribute never satisfies a predicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Predicate {
    Equals { attribute: String, value: String },
    Contains { attribute: String, value: String },
    OneOf { attribute: String, values: Vec<String> },
}

impl Predicate {
    pub fn holds(&self, entity: &CandidateEntity) -> bool {
        let fold = |s: &str| s.trim().to_lowercase();
        match self {
            Predicate::Equals { attribute, value } => entity
                .attributes
                .get(attribute)
                .is_some_and(|v| fold(v) == fold(value)),
            Predicate::Contains { attribute, value } => entity
                .attributes
                .get(attribute)
                .is_some_and(|v| fold(v).contains(&fold(value))),
            Predicate::OneOf { attribute, values } => entity
                .attributes
                .get(attribute)
                .is_some_and(|v| values.iter().any(|x| fold(x) == fold(v))),
        }
    }
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub constraint_id: String,
    #[serde(flatten)]
    pub predicate: Predicate,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

impl Constraint {
    pub fn new(constraint_id: impl Into<String>, predicate: Predicate, weight: f64) -> Self {
        Self {
            constraint_id: constraint_id.into(),
            predicate,
            weight,
        }
    }

    fn check_weight(&self) -> Result<()> {
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(VbError::invalid(format!(
                "constraint {}: weight must be finite and nonnegative, got {}",
                self.constraint_id, self.weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Softmax,
    Relaxation,
    /// Linker scores and constraint penalties combined in one softmax.
    Merged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentEntry {
    #[serde(flatten)]
    pub entity: CandidateEntity,
    pub probability: f64,
}

/// Probability vector over candidate entities.
///
/// Distributions returned by [`build_intent_distribution`] have unique entity
/// ids. Intermediate distributions (straight out of the softmax) may still
/// contain duplicates until [`deduplicate`] runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentDistribution {
    pub entries: Vec<IntentEntry>,
    pub temperature_used: f64,
    pub provenance: Provenance,
}

impl IntentDistribution {
    /// Builds a distribution from explicit masses, checking normalization.
    pub fn from_masses(
        entities: Vec<CandidateEntity>,
        masses: &[f64],
        provenance: Provenance,
    ) -> Result<Self> {
        if entities.len() != masses.len() {
            return Err(VbError::invalid("entity and mass counts differ"));
        }
        let dist = Self {
            entries: entities
                .into_iter()
                .zip(masses)
                .map(|(entity, &probability)| IntentEntry {
                    entity,
                    probability,
                })
                .collect(),
            temperature_used: 1.0,
            provenance,
        };
        dist.check()?;
        Ok(dist)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.probability).collect()
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.entity.entity_id.as_str())
    }

    pub fn entities(&self) -> Vec<CandidateEntity> {
        self.entries.iter().map(|e| e.entity.clone()).collect()
    }

    pub fn contains(&self, entity_id: &str) -> bool {
        self.entity_ids().any(|id| id == entity_id)
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.iter().map(|e| e.probability).sum()
    }

    /// Checks nonemptiness, nonnegativity and unit mass.
    pub fn check(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(VbError::invalid("distribution has no entries"));
        }
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| !e.probability.is_finite() || e.probability < 0.0)
        {
            return Err(VbError::invalid(format!(
                "entity {} has invalid probability {}",
                e.entity.entity_id, e.probability
            )));
        }
        let mass = self.total_mass();
        if (mass - 1.0).abs() > MASS_TOLERANCE {
            return Err(VbError::invalid(format!("probabilities sum to {mass}")));
        }
        Ok(())
    }

    /// Entry indices sorted by probability descending, then entity id.
    pub fn ranked_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.entries.len()).collect();
        idx.sort_by(|&a, &b| rank_order(&self.entries[a], &self.entries[b]));
        idx
    }
}

fn rank_order(a: &IntentEntry, b: &IntentEntry) -> Ordering {
    b.probability
        .partial_cmp(&a.probability)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.entity.entity_id.cmp(&b.entity.entity_id))
}

/// Exponentiates with a max shift and normalizes.
fn normalized_exp(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn check_temperature(temperature: f64) -> Result<()> {
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(VbError::invalid(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(())
}

fn check_scores(candidates: &[ScoredCandidate]) -> Result<()> {
    if candidates.is_empty() {
        return Err(VbError::invalid("candidate list is empty"));
    }
    if let Some(c) = candidates.iter().find(|c| !c.raw_score.is_finite()) {
        return Err(VbError::invalid(format!(
            "candidate {} has non-finite score {}",
            c.entity.entity_id, c.raw_score
        )));
    }
    Ok(())
}

/// `pi_i = exp(s_i / T) / sum_j exp(s_j / T)`, preserving input order.
pub fn softmax_distribution(
    candidates: &[ScoredCandidate],
    temperature: f64,
) -> Result<IntentDistribution> {
    check_scores(candidates)?;
    check_temperature(temperature)?;
    let logits: Vec<f64> = candidates
        .iter()
        .map(|c| c.raw_score / temperature)
        .collect();
    Ok(assemble(
        candidates.iter().map(|c| c.entity.clone()),
        normalized_exp(&logits),
        temperature,
        Provenance::Softmax,
    ))
}

/// Weighted count of violated constraints.
pub fn violation_penalty(entity: &CandidateEntity, constraints: &[Constraint]) -> Result<f64> {
    let mut penalty = 0.0;
    for c in constraints {
        c.check_weight()?;
        if !c.predicate.holds(entity) {
            penalty += c.weight;
        }
    }
    Ok(penalty)
}

/// `pi(E) proportional to exp(-penalty(E))`.
pub fn relaxation_distribution(
    candidates: &[CandidateEntity],
    constraints: &[Constraint],
) -> Result<IntentDistribution> {
    if candidates.is_empty() {
        return Err(VbError::invalid("candidate list is empty"));
    }
    let logits = candidates
        .iter()
        .map(|e| violation_penalty(e, constraints).map(|d| -d))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(
        candidates.iter().cloned(),
        normalized_exp(&logits),
        1.0,
        Provenance::Relaxation,
    ))
}

/// Softmax over `s_i / T - penalty(E_i)`: the product of the linker softmax and
/// the relaxation distribution, renormalized. Without constraints this is the
/// plain softmax.
pub fn combined_distribution(
    candidates: &[ScoredCandidate],
    constraints: &[Constraint],
    temperature: f64,
) -> Result<IntentDistribution> {
    if constraints.is_empty() {
        return softmax_distribution(candidates, temperature);
    }
    check_scores(candidates)?;
    check_temperature(temperature)?;
    let logits = candidates
        .iter()
        .map(|c| violation_penalty(&c.entity, constraints).map(|d| c.raw_score / temperature - d))
        .collect::<Result<Vec<_>>>()?;
    Ok(assemble(
        candidates.iter().map(|c| c.entity.clone()),
        normalized_exp(&logits),
        temperature,
        Provenance::Merged,
    ))
}

fn assemble(
    entities: impl Iterator<Item = CandidateEntity>,
    probs: Vec<f64>,
    temperature: f64,
    provenance: Provenance,
) -> IntentDistribution {
    IntentDistribution {
        entries: entities
            .zip(probs)
            .map(|(entity, probability)| IntentEntry {
                entity,
                probability,
            })
            .collect(),
        temperature_used: temperature,
        provenance,
    }
}

/// Case-folds, strips punctuation and collapses whitespace.
pub fn normalize_text(s: &str) -> String {
    let stripped: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Maps an entity to the key under which duplicates are merged.
///
/// Embedding-based clustering plugs in here; the crate ships the KB-id and
/// surface-name rules.
pub trait Canonicalizer: Send + Sync {
    /// `None` leaves the entity unmerged by this rule.
    fn key(&self, entity: &CandidateEntity) -> Result<Option<String>>;
}

/// Resolves entity ids through an alias table (`id -> canonical id`), following
/// chains until an id maps to nothing or to itself.
pub struct KbIdCanonicalizer<'a> {
    pub alias_table: &'a BTreeMap<String, String>,
}

impl KbIdCanonicalizer<'_> {
    pub fn resolve(&self, id: &str) -> Result<String> {
        let mut current = id;
        let mut visited = BTreeSet::new();
        while let Some(next) = self.alias_table.get(current) {
            if next == current {
                break;
            }
            if !visited.insert(current) {
                return Err(VbError::invalid(format!("alias cycle through {current:?}")));
            }
            current = next;
        }
        Ok(current.to_string())
    }
}

impl Canonicalizer for KbIdCanonicalizer<'_> {
    fn key(&self, entity: &CandidateEntity) -> Result<Option<String>> {
        self.resolve(&entity.entity_id).map(Some)
    }
}

pub struct NameCanonicalizer;

impl Canonicalizer for NameCanonicalizer {
    fn key(&self, entity: &CandidateEntity) -> Result<Option<String>> {
        let key = normalize_text(&entity.surface_name);
        Ok((!key.is_empty()).then_some(key))
    }
}

/// Merges entries with the same canonical id or the same normalized surface name.
pub fn deduplicate(
    dist: &IntentDistribution,
    alias_table: &BTreeMap<String, String>,
) -> Result<IntentDistribution> {
    let kb = KbIdCanonicalizer { alias_table };
    deduplicate_with(dist, &[&kb, &NameCanonicalizer])
}

/// Merges entries that share a key under any of the canonicalizers
/// (transitively). The merged entry keeps the metadata of its most probable
/// member (ties: smallest entity id), takes the other members' names and
/// aliases as extra aliases, and carries the summed mass. Groups appear in the
/// order of their first member.
pub fn deduplicate_with(
    dist: &IntentDistribution,
    canonicalizers: &[&dyn Canonicalizer],
) -> Result<IntentDistribution> {
    let n = dist.entries.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }

    for canon in canonicalizers {
        let mut first_with_key: HashMap<String, usize> = HashMap::new();
        for (i, entry) in dist.entries.iter().enumerate() {
            let Some(key) = canon.key(&entry.entity)? else {
                continue;
            };
            match first_with_key.get(&key) {
                Some(&j) => {
                    let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                    if ri != rj {
                        parent[ri.max(rj)] = ri.min(rj);
                    }
                }
                None => {
                    first_with_key.insert(key, i);
                }
            }
        }
    }

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_of_root: HashMap<usize, usize> = HashMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        let g = *group_of_root.entry(root).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }

    let entries = groups
        .into_iter()
        .map(|members| {
            if members.len() == 1 {
                return dist.entries[members[0]].clone();
            }
            let survivor = *members
                .iter()
                .min_by(|&&a, &&b| rank_order(&dist.entries[a], &dist.entries[b]))
                .expect("groups are nonempty");
            let mut entity = dist.entries[survivor].entity.clone();
            let mut seen: BTreeSet<String> = entity
                .aliases
                .iter()
                .chain(std::iter::once(&entity.surface_name))
                .map(|a| normalize_text(a))
                .collect();
            for &m in members.iter().filter(|&&m| m != survivor) {
                let other = &dist.entries[m].entity;
                for name in std::iter::once(&other.surface_name).chain(&other.aliases) {
                    let key = normalize_text(name);
                    if !key.is_empty() && seen.insert(key) {
                        entity.aliases.push(name.clone());
                    }
                }
            }
            let probability = members.iter().map(|&m| dist.entries[m].probability).sum();
            IntentEntry {
                entity,
                probability,
            }
        })
        .collect();

    Ok(IntentDistribution {
        entries,
        temperature_used: dist.temperature_used,
        provenance: dist.provenance,
    })
}

/// Rule for dropping negligible interpretations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TruncationPolicy {
    /// Keep entries with probability at least `tau`.
    Threshold { tau: f64 },
    TopK { k: usize },
    /// Keep the smallest high-probability prefix whose mass reaches `rho`.
    CumulativeMass { rho: f64 },
}

impl TruncationPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TruncationPolicy::Threshold { tau } if !(0.0..1.0).contains(&tau) => {
                Err(VbError::invalid(format!("threshold must be in [0,1), got {tau}")))
            }
            TruncationPolicy::TopK { k: 0 } => Err(VbError::invalid("top-k requires k >= 1")),
            TruncationPolicy::CumulativeMass { rho } if !(rho > 0.0 && rho <= 1.0) => Err(
                VbError::invalid(format!("cumulative mass must be in (0,1], got {rho}")),
            ),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for TruncationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TruncationPolicy::Threshold { tau } => write!(f, "threshold:{tau}"),
            TruncationPolicy::TopK { k } => write!(f, "top-k:{k}"),
            TruncationPolicy::CumulativeMass { rho } => write!(f, "mass:{rho}"),
        }
    }
}

impl FromStr for TruncationPolicy {
    type Err = VbError;

    /// Accepts `threshold:TAU`, `top-k:K` and `mass:RHO`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| VbError::invalid(format!("truncation policy {s:?} lacks ':'")))?;
        let bad = |_| VbError::invalid(format!("bad truncation parameter in {s:?}"));
        let policy = match kind {
            "threshold" => TruncationPolicy::Threshold {
                tau: value.parse().map_err(bad)?,
            },
            "top-k" | "topk" => TruncationPolicy::TopK {
                k: value
                    .parse()
                    .map_err(|_| VbError::invalid(format!("bad top-k in {s:?}")))?,
            },
            "mass" | "cumulative-mass" => TruncationPolicy::CumulativeMass {
                rho: value.parse().map_err(bad)?,
            },
            other => return Err(VbError::invalid(format!("unknown truncation kind {other:?}"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

/// Drops entries per `policy` and rescales survivors to unit mass.
///
/// Survivors keep their input order; the most probable entry always survives.
/// If nothing is dropped the input is returned unchanged.
pub fn truncate_and_renormalize(
    dist: &IntentDistribution,
    policy: &TruncationPolicy,
) -> Result<IntentDistribution> {
    policy.validate()?;
    if dist.is_empty() {
        return Err(VbError::invalid("distribution has no entries"));
    }
    let ranked = dist.ranked_indices();
    let keep_count = match *policy {
        TruncationPolicy::Threshold { tau } => ranked
            .iter()
            .take_while(|&&i| dist.entries[i].probability >= tau)
            .count(),
        TruncationPolicy::TopK { k } => k.min(ranked.len()),
        TruncationPolicy::CumulativeMass { rho } => {
            let mut mass = 0.0;
            let mut count = 0;
            for &i in &ranked {
                mass += dist.entries[i].probability;
                count += 1;
                // absorb rounding in the prefix sum
                if mass >= rho - 1e-12 {
                    break;
                }
            }
            count
        }
    }
    .max(1);

    if keep_count == ranked.len() {
        return Ok(dist.clone());
    }
    let mut keep = vec![false; dist.len()];
    for &i in &ranked[..keep_count] {
        keep[i] = true;
    }
    let kept_mass: f64 = (0..dist.len())
        .filter(|&i| keep[i])
        .map(|i| dist.entries[i].probability)
        .sum();
    if kept_mass <= 0.0 {
        return Err(VbError::invalid("surviving entries carry no mass"));
    }
    let entries = dist
        .entries
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| IntentEntry {
            entity: e.entity.clone(),
            probability: e.probability / kept_mass,
        })
        .collect();
    Ok(IntentDistribution {
        entries,
        temperature_used: dist.temperature_used,
        provenance: dist.provenance,
    })
}

/// Full input-side pipeline: combined softmax, dedup, truncation.
pub fn build_intent_distribution(
    candidates: &[ScoredCandidate],
    constraints: &[Constraint],
    temperature: f64,
    alias_table: &BTreeMap<String, String>,
    truncation: Option<&TruncationPolicy>,
) -> Result<IntentDistribution> {
    let dist = combined_distribution(candidates, constraints, temperature)?;
    let dist = deduplicate(&dist, alias_table)?;
    match truncation {
        Some(policy) => truncate_and_renormalize(&dist, policy),
        None => Ok(dist),
    }
}
