//! Entity assignment strategies for retrieved results.
//!
//! [`RuleTagger`] is deterministic and offline. [`RemoteTagger`] delegates to an
//! HTTP service (typically LLM-backed) speaking a small JSON contract:
//!
//! ```text
//! POST {query_id, doc: {doc_id, title, snippet, url}, candidates: [{entity_id, surface_name, aliases}]}
//!   -> {entity_id: string | null, confidence: number}
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VbError};
use crate::gain::{EntityAssignment, ResultItem};
use crate::intent::{normalize_text, CandidateEntity};

/// Environment variable that overrides the remote tagger endpoint.
pub const ENDPOINT_ENV: &str = "VB_TAGGER_ENDPOINT";

/// Maps a result to at most one of the candidates.
///
/// Implementations must be deterministic for fixed inputs if golden or
/// replayable reports are required.
pub trait Tagger: Send + Sync {
    fn tag(
        &self,
        query_id: &str,
        item: &ResultItem,
        candidates: &[CandidateEntity],
    ) -> Result<EntityAssignment>;

    /// Whether `tag` may be called from several threads at once. Serial
    /// taggers are invoked one item at a time.
    fn supports_concurrency(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum TagRule {
    /// `doc_id`, or the last path segment of `url`, equals the entity id.
    ExactId,
    /// Title equals the surface name after normalization.
    ExactName,
    /// Title or snippet contains an alias as a whole-token phrase.
    Alias,
    /// Fraction of a name's tokens found in title + snippet reaches `threshold`.
    TokenOverlap { threshold: f64 },
}

impl TagRule {
    pub fn default_order() -> Vec<TagRule> {
        vec![
            TagRule::ExactId,
            TagRule::ExactName,
            TagRule::Alias,
            TagRule::TokenOverlap { threshold: 0.8 },
        ]
    }
}

fn default_timeout_ms() -> u64 {
    10_000
}

fn default_retries() -> u32 {
    2
}

fn default_in_flight() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteTaggerConfig {
    pub endpoint_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_log: Option<PathBuf>,
}

impl RemoteTaggerConfig {
    pub fn new(endpoint_url: impl Into<String>) -> Self {
        Self {
            endpoint_url: endpoint_url.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            audit_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaggerSpec {
    RuleBased {
        /// Alias string to entity id.
        #[serde(default)]
        alias_table: BTreeMap<String, String>,
        #[serde(default = "TagRule::default_order")]
        match_order: Vec<TagRule>,
    },
    Remote(RemoteTaggerConfig),
}

impl Default for TaggerSpec {
    fn default() -> Self {
        TaggerSpec::RuleBased {
            alias_table: BTreeMap::new(),
            match_order: TagRule::default_order(),
        }
    }
}

impl TaggerSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            TaggerSpec::RuleBased { match_order, .. } => {
                for rule in match_order {
                    if let TagRule::TokenOverlap { threshold } = rule {
                        if !(*threshold > 0.0 && *threshold <= 1.0) {
                            return Err(VbError::invalid(format!(
                                "token overlap threshold must be in (0,1], got {threshold}"
                            )));
                        }
                    }
                }
                Ok(())
            }
            TaggerSpec::Remote(cfg) => {
                if cfg.endpoint_url.is_empty() {
                    return Err(VbError::invalid("remote tagger needs an endpoint url"));
                }
                if cfg.max_in_flight == 0 {
                    return Err(VbError::invalid("max_in_flight must be >= 1"));
                }
                Ok(())
            }
        }
    }

    pub fn build(&self) -> Result<Box<dyn Tagger>> {
        self.validate()?;
        Ok(match self {
            TaggerSpec::RuleBased {
                alias_table,
                match_order,
            } => Box::new(RuleTagger::new(alias_table.clone(), match_order.clone())),
            TaggerSpec::Remote(cfg) => Box::new(RemoteTagger::new(cfg.clone())?),
        })
    }
}

fn tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_phrase(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

pub struct RuleTagger {
    alias_table: BTreeMap<String, String>,
    match_order: Vec<TagRule>,
}

impl RuleTagger {
    pub fn new(alias_table: BTreeMap<String, String>, match_order: Vec<TagRule>) -> Self {
        Self {
            alias_table,
            match_order,
        }
    }

    fn aliases_of<'a>(&'a self, entity: &'a CandidateEntity) -> impl Iterator<Item = &'a str> {
        entity.aliases.iter().map(String::as_str).chain(
            self.alias_table
                .iter()
                .filter(move |(_, id)| **id == entity.entity_id)
                .map(|(alias, _)| alias.as_str()),
        )
    }

    fn apply(
        &self,
        rule: &TagRule,
        item: &ResultItem,
        candidates: &[CandidateEntity],
    ) -> Option<(String, f64)> {
        // (score, entity id): highest score wins, then smallest id
        let pick = |scored: Vec<(f64, &str)>| {
            scored
                .into_iter()
                .min_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)))
                .map(|(s, id)| (id.to_string(), s))
        };
        match rule {
            TagRule::ExactId => {
                let url_tail = item
                    .url
                    .as_deref()
                    .and_then(|u| u.trim_end_matches('/').rsplit('/').next());
                pick(
                    candidates
                        .iter()
                        .filter(|c| c.entity_id == item.doc_id || url_tail == Some(c.entity_id.as_str()))
                        .map(|c| (1.0, c.entity_id.as_str()))
                        .collect(),
                )
            }
            TagRule::ExactName => {
                let title = normalize_text(&item.title);
                if title.is_empty() {
                    return None;
                }
                pick(
                    candidates
                        .iter()
                        .filter(|c| normalize_text(&c.surface_name) == title)
                        .map(|c| (1.0, c.entity_id.as_str()))
                        .collect(),
                )
            }
            TagRule::Alias => {
                let text = [tokens(&item.title), tokens(&item.snippet)];
                let mut hits = Vec::new();
                for c in candidates {
                    let longest = self
                        .aliases_of(c)
                        .map(tokens)
                        .filter(|a| text.iter().any(|t| contains_phrase(t, a)))
                        .map(|a| a.len())
                        .max();
                    if let Some(len) = longest {
                        hits.push((len as f64, c.entity_id.as_str()));
                    }
                }
                pick(hits).map(|(id, _)| (id, 1.0))
            }
            TagRule::TokenOverlap { threshold } => {
                let doc: BTreeSet<String> = tokens(&item.title)
                    .into_iter()
                    .chain(tokens(&item.snippet))
                    .collect();
                let mut hits = Vec::new();
                for c in candidates {
                    let best = std::iter::once(c.surface_name.as_str())
                        .chain(self.aliases_of(c))
                        .filter_map(|name| {
                            let name: BTreeSet<String> = tokens(name).into_iter().collect();
                            (!name.is_empty()).then(|| {
                                name.iter().filter(|t| doc.contains(*t)).count() as f64
                                    / name.len() as f64
                            })
                        })
                        .fold(0.0, f64::max);
                    if best > 0.0 && best >= *threshold {
                        hits.push((best, c.entity_id.as_str()));
                    }
                }
                pick(hits)
            }
        }
    }
}

impl Tagger for RuleTagger {
    fn tag(
        &self,
        _query_id: &str,
        item: &ResultItem,
        candidates: &[CandidateEntity],
    ) -> Result<EntityAssignment> {
        for rule in &self.match_order {
            if let Some((id, confidence)) = self.apply(rule, item, candidates) {
                return Ok(EntityAssignment::to_entity(item, id, confidence));
            }
        }
        Ok(EntityAssignment::absent(item))
    }
}

#[derive(Debug, Serialize)]
struct RemoteDoc<'a> {
    doc_id: &'a str,
    title: &'a str,
    snippet: &'a str,
    url: Option<&'a str>,
}

#[derive(Debug, Serialize)]
struct RemoteCandidate<'a> {
    entity_id: &'a str,
    surface_name: &'a str,
    aliases: &'a [String],
}

#[derive(Debug, Serialize)]
pub(crate) struct RemoteRequest<'a> {
    query_id: &'a str,
    doc: RemoteDoc<'a>,
    candidates: Vec<RemoteCandidate<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteResponse {
    pub entity_id: Option<String>,
    #[serde(default)]
    pub confidence: f64,
}

/// Counting semaphore bounding concurrent requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permit lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("permit lock");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permit lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteTagger {
    endpoint: String,
    max_retries: u32,
    agent: ureq::Agent,
    permits: Permits,
    audit: Option<Mutex<File>>,
}

impl RemoteTagger {
    /// The endpoint from [`ENDPOINT_ENV`], when set, replaces the configured one.
    pub fn new(config: RemoteTaggerConfig) -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV)
            .ok()
            .filter(|s| !s.is_empty())
            .unwrap_or(config.endpoint_url);
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let audit = match &config.audit_log {
            Some(path) => Some(Mutex::new(
                OpenOptions::new().create(true).append(true).open(path)?,
            )),
            None => None,
        };
        Ok(Self {
            endpoint,
            max_retries: config.max_retries,
            agent,
            permits: Permits {
                free: Mutex::new(config.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            audit,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn audit(&self, record: serde_json::Value) {
        if let Some(file) = &self.audit {
            let mut f = file.lock().expect("audit lock");
            if let Err(e) = writeln!(f, "{record}") {
                warn!("audit log write failed: {e}");
            }
        }
    }

    fn attempt(&self, request: &RemoteRequest<'_>) -> std::result::Result<RemoteResponse, String> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(request)
            .map_err(|e| e.to_string())?;
        let status = resp.status();
        if !status.is_success() {
            return Err(format!("HTTP {status}"));
        }
        resp.body_mut()
            .read_json::<RemoteResponse>()
            .map_err(|e| format!("bad response body: {e}"))
    }
}

impl Tagger for RemoteTagger {
    fn tag(
        &self,
        query_id: &str,
        item: &ResultItem,
        candidates: &[CandidateEntity],
    ) -> Result<EntityAssignment> {
        let request = RemoteRequest {
            query_id,
            doc: RemoteDoc {
                doc_id: &item.doc_id,
                title: &item.title,
                snippet: &item.snippet,
                url: item.url.as_deref(),
            },
            candidates: candidates
                .iter()
                .map(|c| RemoteCandidate {
                    entity_id: &c.entity_id,
                    surface_name: &c.surface_name,
                    aliases: &c.aliases,
                })
                .collect(),
        };

        let _permit = self.permits.acquire();
        let mut last_error = String::new();
        for attempt in 0..=self.max_retries {
            match self.attempt(&request) {
                Ok(response) => {
                    self.audit(serde_json::json!({
                        "query_id": query_id,
                        "doc_id": item.doc_id,
                        "attempt": attempt,
                        "response": response,
                    }));
                    return Ok(validate_response(item, candidates, response));
                }
                Err(e) => {
                    self.audit(serde_json::json!({
                        "query_id": query_id,
                        "doc_id": item.doc_id,
                        "attempt": attempt,
                        "error": e,
                    }));
                    last_error = e;
                }
            }
        }
        Err(VbError::TaggerUnavailable(format!(
            "{} after {} attempts: {last_error}",
            self.endpoint,
            self.max_retries + 1
        )))
    }
}

/// Keeps only assignments to known candidates; confidence is clamped to [0,1].
pub fn validate_response(
    item: &ResultItem,
    candidates: &[CandidateEntity],
    response: RemoteResponse,
) -> EntityAssignment {
    match response.entity_id {
        None => EntityAssignment::absent(item),
        Some(id) if candidates.iter().any(|c| c.entity_id == id) => {
            let confidence = if response.confidence.is_finite() {
                response.confidence.clamp(0.0, 1.0)
            } else {
                0.0
            };
            EntityAssignment::to_entity(item, id, confidence)
        }
        Some(id) => {
            warn!(
                "tagger returned unknown entity {id:?} for doc {}; treating as unassigned",
                item.doc_id
            );
            EntityAssignment::absent(item)
        }
    }
}
