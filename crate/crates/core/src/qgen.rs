//! Query realization for scheduler anchors: relation probes, neighborhood
//! queries, history-aware deduplication with resampling, and convergence.

use std::io::Write;
use std::path::Path;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::embed::{cosine, embed_text, EmbedderSpec, EmbeddingVector};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};
use crate::sched::{deficit, AnchorPair, PenaltyReason, Scheduler, ScoreBreakdown};

pub const BOOTSTRAP_TEMPLATE: &str = "Tell me about {topic}.";

/// Emitted queries must not match any of these (case-insensitive).
pub const STEALTH_BLOCKLIST: &[&str] = &[r"\bverbatim\b", r"\brepeat\s+all\b", r"\bignore\s+(all\s+)?previous\b"];

/// (relation, phrase, variants). Every variant contains the phrase and `{e}`.
const TEMPLATES: &[(&str, &str, &[&str])] = &[
    (
        "has_symptom",
        "symptoms",
        &[
            "What are the symptoms associated with {e}?",
            "Which symptoms do patients with {e} usually report?",
            "How do the symptoms of {e} typically present?",
        ],
    ),
    (
        "treated_by",
        "treatments",
        &[
            "What treatments are used for {e}?",
            "Which treatments are recommended when managing {e}?",
            "How effective are the usual treatments for {e}?",
        ],
    ),
    (
        "caused_by",
        "causes",
        &[
            "What are the known causes of {e}?",
            "Which underlying causes lead to {e}?",
            "How do the causes of {e} develop?",
        ],
    ),
    (
        "associated_with",
        "associated conditions",
        &[
            "What associated conditions are linked to {e}?",
            "Which associated conditions often accompany {e}?",
            "How do associated conditions relate to {e}?",
        ],
    ),
    (
        "risk_factor_for",
        "risk factor",
        &[
            "What is {e} a risk factor for?",
            "Which conditions list {e} as a risk factor?",
            "How strong a risk factor is {e} for related conditions?",
        ],
    ),
    (
        "diagnosed_by",
        "diagnosis",
        &[
            "How is the diagnosis of {e} made?",
            "Which tests support a diagnosis of {e}?",
            "What does a typical diagnosis of {e} involve?",
        ],
    ),
];

pub fn bootstrap_query(topic: &str) -> String {
    BOOTSTRAP_TEMPLATE.replace("{topic}", topic.trim())
}

/// Natural-language phrase for a relation label.
pub fn relation_phrase(relation: &str) -> String {
    TEMPLATES
        .iter()
        .find(|(r, _, _)| *r == relation)
        .map(|(_, p, _)| p.to_string())
        .unwrap_or_else(|| relation.replace('_', " "))
}

pub fn template_variants(relation: &str) -> Option<&'static [&'static str]> {
    TEMPLATES.iter().find(|(r, _, _)| *r == relation).map(|(_, _, v)| *v)
}

/// Relation probe for `(entity, relation)`; `variant` wraps around the
/// template list. Unknown relations use the generic form.
pub fn relation_probe(entity: &str, relation: &str, variant: usize) -> String {
    match template_variants(relation) {
        Some(v) => v[variant % v.len()].replace("{e}", entity),
        None => format!("Tell me about the {} of {entity}.", relation.replace('_', " ")),
    }
}

/// Open-ended query naming up to two missing relations, in the given order.
pub fn neighborhood_query(entity: &str, missing: &[String]) -> String {
    match missing {
        [] => format!("Tell me more about {entity}."),
        [a] => format!("Describe {entity}, including its {}.", relation_phrase(a)),
        [a, b, ..] => format!(
            "Describe {entity}, including its {} and {}.",
            relation_phrase(a),
            relation_phrase(b)
        ),
    }
}

/// Relations `e` lacks, by deficit descending; ties keep schema order.
pub fn ranked_missing_relations(g: &KnowledgeGraph, e: EntityId) -> Result<Vec<String>> {
    let mut scored = Vec::new();
    for r in g.relations() {
        if !g.has_edge_type(e, &r) {
            scored.push((deficit(g, e, &r)?, r));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(scored.into_iter().map(|(_, r)| r).collect())
}

fn entity_name(g: &KnowledgeGraph, e: EntityId) -> Result<String> {
    g.entity(e)
        .map(|x| x.canonical_name.clone())
        .ok_or_else(|| Error::UnknownEntity(e.to_string()))
}

pub fn formulate_relation_probe(g: &KnowledgeGraph, anchor: &AnchorPair, variant: usize) -> Result<String> {
    let relation = anchor
        .relation
        .as_deref()
        .ok_or_else(|| Error::InvalidInput("relation probe needs a relation".into()))?;
    Ok(relation_probe(&entity_name(g, anchor.entity)?, relation, variant))
}

pub fn formulate_neighborhood(g: &KnowledgeGraph, e: EntityId) -> Result<String> {
    let missing = ranked_missing_relations(g, e)?;
    Ok(neighborhood_query(&entity_name(g, e)?, &missing))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    Bootstrap,
    Relation,
    Neighborhood,
    Random,
    Keyword,
    Continuation,
}

#[derive(Debug, Clone, Default)]
pub struct QueryHistory {
    queries: Vec<String>,
    embeddings: Vec<EmbeddingVector>,
}

impl QueryHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[String] {
        &self.queries
    }

    pub fn push(&mut self, query: String, embedding: EmbeddingVector) {
        self.queries.push(query);
        self.embeddings.push(embedding);
    }

    pub fn max_similarity(&self, v: &EmbeddingVector) -> f64 {
        self.embeddings
            .iter()
            .filter_map(|h| cosine(h, v).ok())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_duplicate(&self, v: &EmbeddingVector, tau_dup: f64) -> bool {
        !self.is_empty() && self.max_similarity(v) >= tau_dup
    }
}

pub fn is_duplicate(q: &str, hist: &QueryHistory, tau_dup: f64, spec: &EmbedderSpec) -> Result<bool> {
    Ok(hist.is_duplicate(&embed_text(q, spec)?, tau_dup))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RealizeRequest {
    pub entity: String,
    pub relation: Option<String>,
    pub neighbors: Vec<String>,
    /// Missing relations ranked by deficit.
    pub missing: Vec<String>,
    pub variant: usize,
}

pub trait QueryRealizer: Send + Sync {
    fn name(&self) -> &str;

    /// Candidate query text, or `None` when this realizer has nothing to offer.
    fn realize(&self, req: &RealizeRequest) -> Option<String>;
}

pub struct TemplateRealizer;

impl QueryRealizer for TemplateRealizer {
    fn name(&self) -> &str {
        "template"
    }

    fn realize(&self, req: &RealizeRequest) -> Option<String> {
        Some(match &req.relation {
            Some(r) => relation_probe(&req.entity, r, req.variant),
            None => neighborhood_query(&req.entity, &req.missing),
        })
    }
}

#[derive(Serialize)]
struct WireNeighborhood<'a> {
    neighbors: &'a [String],
    missing_relations: &'a [String],
}

#[derive(Serialize)]
struct WireRequest<'a> {
    task: &'static str,
    entity: &'a str,
    relation: Option<&'a str>,
    neighborhood: WireNeighborhood<'a>,
}

#[derive(Deserialize)]
struct WireResponse {
    query: String,
}

/// Delegates realization to a `{"task":"realize", ...}` -> `{"query"}` service.
pub struct HttpRealizer {
    endpoint: String,
    retries: usize,
    agent: ureq::Agent,
}

impl HttpRealizer {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            retries,
            agent,
        }
    }
}

impl QueryRealizer for HttpRealizer {
    fn name(&self) -> &str {
        "http"
    }

    fn realize(&self, req: &RealizeRequest) -> Option<String> {
        let wire = WireRequest {
            task: "realize",
            entity: &req.entity,
            relation: req.relation.as_deref(),
            neighborhood: WireNeighborhood {
                neighbors: &req.neighbors,
                missing_relations: &req.missing,
            },
        };
        for _ in 0..=self.retries {
            match self.agent.post(&self.endpoint).send_json(&wire) {
                Ok(mut resp) => match resp.body_mut().read_json::<WireResponse>() {
                    Ok(r) => return Some(r.query),
                    Err(e) => {
                        log::warn!("realizer returned malformed body: {e}");
                        return None;
                    }
                },
                Err(e) => log::warn!("realizer request failed: {e}"),
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealizerConfig {
    pub kind: String,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub retries: usize,
}

impl Default for RealizerConfig {
    fn default() -> Self {
        Self {
            kind: "template".into(),
            endpoint: None,
            timeout_ms: 30_000,
            retries: 2,
        }
    }
}

pub fn build_realizer(cfg: &RealizerConfig) -> Result<Box<dyn QueryRealizer>> {
    match cfg.kind.as_str() {
        "template" => Ok(Box::new(TemplateRealizer)),
        "http" => {
            let endpoint = cfg
                .endpoint
                .clone()
                .ok_or_else(|| Error::Config("http realizer needs an endpoint".into()))?;
            Ok(Box::new(HttpRealizer::new(
                endpoint,
                Duration::from_millis(cfg.timeout_ms),
                cfg.retries,
            )))
        }
        other => Err(Error::UnknownStrategy(format!("realizer {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmittedQuery {
    pub text: String,
    pub anchor: AnchorPair,
    pub anchor_name: String,
    pub mode: QueryMode,
    /// 1-based trial that produced this query.
    pub trials: usize,
    pub breakdown: ScoreBreakdown,
}

#[derive(Debug, Clone, PartialEq)]
pub enum GenOutcome {
    Query(EmittedQuery),
    Converged,
}

pub struct QueryGenerator {
    realizer: Box<dyn QueryRealizer>,
    embed_spec: EmbedderSpec,
    tau_dup: f64,
    max_trials: usize,
    blocklist: Vec<Regex>,
    rng: ChaCha8Rng,
}

impl QueryGenerator {
    pub fn new(
        realizer: Box<dyn QueryRealizer>,
        embed_spec: EmbedderSpec,
        tau_dup: f64,
        max_trials: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(tau_dup > 0.0 && tau_dup <= 1.0) {
            return Err(Error::Config(format!("tau_dup {tau_dup} outside (0, 1]")));
        }
        if max_trials == 0 {
            return Err(Error::Config("max_trials must be positive".into()));
        }
        let blocklist = STEALTH_BLOCKLIST
            .iter()
            .map(|p| Regex::new(&format!("(?i){p}")))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self {
            realizer,
            embed_spec,
            tau_dup,
            max_trials,
            blocklist,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        })
    }

    pub fn embed_spec(&self) -> &EmbedderSpec {
        &self.embed_spec
    }

    pub fn is_stealthy(&self, q: &str) -> bool {
        !self.blocklist.iter().any(|re| re.is_match(q))
    }

    fn grounded(q: &str, g: &KnowledgeGraph, e: EntityId) -> bool {
        let lower = q.to_lowercase();
        g.entity(e).is_some_and(|ent| {
            lower.contains(&ent.canonical_name.to_lowercase())
                || ent.aliases.iter().any(|a| lower.contains(&a.to_lowercase()))
        })
    }

    fn realize(&mut self, g: &KnowledgeGraph, anchor: &AnchorPair) -> Result<String> {
        let entity = entity_name(g, anchor.entity)?;
        let neighbors = g
            .edges()
            .filter_map(|ed| {
                if ed.head == anchor.entity {
                    Some(ed.tail)
                } else if ed.tail == anchor.entity {
                    Some(ed.head)
                } else {
                    None
                }
            })
            .filter_map(|id| g.entity(id).map(|x| x.canonical_name.clone()))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let req = RealizeRequest {
            entity,
            relation: anchor.relation.clone(),
            neighbors,
            missing: ranked_missing_relations(g, anchor.entity)?,
            variant: self.rng.gen_range(0..3),
        };
        if let Some(q) = self.realizer.realize(&req) {
            let q = q.trim().to_string();
            if !q.is_empty() && Self::grounded(&q, g, anchor.entity) && self.is_stealthy(&q) {
                return Ok(q);
            }
            log::warn!("realizer {} output rejected: {q:?}", self.realizer.name());
        }
        Ok(TemplateRealizer.realize(&req).expect("templates always realize"))
    }

    /// Up to `max_trials` anchor draws; each duplicate formulation penalizes
    /// its own anchor. The emitted query is appended to `hist`.
    pub fn next_query(
        &mut self,
        sched: &mut Scheduler,
        g: &KnowledgeGraph,
        hist: &mut QueryHistory,
        t: usize,
    ) -> Result<GenOutcome> {
        for trial in 1..=self.max_trials {
            let (e, breakdown) = sched.sample_anchor(g, t)?;
            let relation = sched.select_relation(g, e)?;
            let anchor = AnchorPair { entity: e, relation };
            let text = self.realize(g, &anchor)?;
            let emb = embed_text(&text, &self.embed_spec)?;
            if hist.is_duplicate(&emb, self.tau_dup) {
                sched.apply_penalty(e, PenaltyReason::Duplicate);
                continue;
            }
            hist.push(text.clone(), emb);
            let mode = if anchor.relation.is_some() {
                QueryMode::Relation
            } else {
                QueryMode::Neighborhood
            };
            return Ok(GenOutcome::Query(EmittedQuery {
                text,
                anchor_name: entity_name(g, e)?,
                anchor,
                mode,
                trials: trial,
                breakdown,
            }));
        }
        Ok(GenOutcome::Converged)
    }
}

/// One line of the emitted-query log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub round: usize,
    pub query: String,
    pub anchor: Option<String>,
    pub relation: Option<String>,
    pub mode: QueryMode,
    pub trials: usize,
}

pub fn write_query_log(records: &[QueryRecord], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
