//! Output-side tagging and per-intent gains at cutoff `k`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VbError};
use crate::intent::IntentDistribution;
use crate::tagger::Tagger;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultItem {
    pub doc_id: String,
    pub rank: usize,
    #[serde(default)]
    pub title: String,
    #[serde(default)]
    pub snippet: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

/// A system's ranked output for one query. Lists shorter than `cutoff_k` are legal.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedRun {
    pub query_id: String,
    pub items: Vec<ResultItem>,
    pub cutoff_k: usize,
}

impl RankedRun {
    pub fn validate(&self) -> Result<()> {
        if self.cutoff_k == 0 {
            return Err(VbError::Validation(format!(
                "run {}: cutoff_k must be >= 1",
                self.query_id
            )));
        }
        for (i, item) in self.items.iter().enumerate() {
            if item.doc_id.is_empty() {
                return Err(VbError::Validation(format!(
                    "run {}: empty doc_id at position {}",
                    self.query_id,
                    i + 1
                )));
            }
            if item.rank != i + 1 {
                return Err(VbError::Validation(format!(
                    "run {}: ranks must be contiguous from 1, found rank {} at position {}",
                    self.query_id,
                    item.rank,
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityAssignment {
    pub doc_id: String,
    pub rank: usize,
    pub assigned_entity_id: Option<String>,
    pub confidence: f64,
}

impl EntityAssignment {
    pub fn absent(item: &ResultItem) -> Self {
        Self {
            doc_id: item.doc_id.clone(),
            rank: item.rank,
            assigned_entity_id: None,
            confidence: 0.0,
        }
    }

    pub fn to_entity(item: &ResultItem, entity_id: impl Into<String>, confidence: f64) -> Self {
        Self {
            doc_id: item.doc_id.clone(),
            rank: item.rank,
            assigned_entity_id: Some(entity_id.into()),
            confidence,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    #[default]
    Binary,
    Dcg,
}

impl fmt::Display for GainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GainMode::Binary => "binary",
            GainMode::Dcg => "dcg",
        })
    }
}

impl FromStr for GainMode {
    type Err = VbError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary" => Ok(GainMode::Binary),
            "dcg" => Ok(GainMode::Dcg),
            other => Err(VbError::invalid(format!("unknown gain mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentGain {
    pub entity_id: String,
    pub gain: f64,
}

/// Gains aligned 1:1 (same order) with an [`IntentDistribution`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainVector {
    pub per_intent: Vec<IntentGain>,
    pub mode: GainMode,
}

impl GainVector {
    pub fn values(&self) -> Vec<f64> {
        self.per_intent.iter().map(|g| g.gain).collect()
    }

    pub fn len(&self) -> usize {
        self.per_intent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_intent.is_empty()
    }
}

/// Tags every item of `run` against the entities in `dist`, in rank order.
///
/// Assignments to ids outside `dist` are downgraded to absent.
pub fn tag_results(
    run: &RankedRun,
    dist: &IntentDistribution,
    tagger: &dyn Tagger,
) -> Result<Vec<EntityAssignment>> {
    let candidates = dist.entities();
    let tag_one = |item: &ResultItem| -> Result<EntityAssignment> {
        let mut a = tagger.tag(&run.query_id, item, &candidates)?;
        if a.assigned_entity_id.as_deref().is_some_and(|id| !dist.contains(id)) {
            a.assigned_entity_id = None;
            a.confidence = 0.0;
        }
        Ok(a)
    };
    if tagger.supports_concurrency() {
        run.items.par_iter().map(tag_one).collect()
    } else {
        run.items.iter().map(tag_one).collect()
    }
}

/// Best (smallest) rank `<= k` assigned to each entity.
fn best_ranks(assignments: &[EntityAssignment], k: usize) -> HashMap<&str, usize> {
    let mut best: HashMap<&str, usize> = HashMap::new();
    for a in assignments.iter().filter(|a| a.rank >= 1 && a.rank <= k) {
        if let Some(id) = a.assigned_entity_id.as_deref() {
            best.entry(id)
                .and_modify(|r| *r = (*r).min(a.rank))
                .or_insert(a.rank);
        }
    }
    best
}

fn gain_vector(
    assignments: &[EntityAssignment],
    dist: &IntentDistribution,
    k: usize,
    mode: GainMode,
    discount: impl Fn(usize) -> f64,
) -> GainVector {
    let best = best_ranks(assignments, k);
    GainVector {
        per_intent: dist
            .entity_ids()
            .map(|id| IntentGain {
                entity_id: id.to_string(),
                gain: best.get(id).map_or(0.0, |&r| discount(r)),
            })
            .collect(),
        mode,
    }
}

/// `g_i = 1` iff some result at rank `<= k` is about `E_i`.
pub fn binary_gain(assignments: &[EntityAssignment], dist: &IntentDistribution, k: usize) -> GainVector {
    gain_vector(assignments, dist, k, GainMode::Binary, |_| 1.0)
}

/// `g_i = 1 / log2(r + 1)` for the best rank `r <= k` about `E_i`, else 0.
pub fn dcg_gain(assignments: &[EntityAssignment], dist: &IntentDistribution, k: usize) -> GainVector {
    gain_vector(assignments, dist, k, GainMode::Dcg, |r| {
        if r == 1 {
            1.0
        } else {
            1.0 / ((r + 1) as f64).log2()
        }
    })
}

pub fn compute_gains(
    assignments: &[EntityAssignment],
    dist: &IntentDistribution,
    k: usize,
    mode: GainMode,
) -> GainVector {
    match mode {
        GainMode::Binary => binary_gain(assignments, dist, k),
        GainMode::Dcg => dcg_gain(assignments, dist, k),
    }
}
