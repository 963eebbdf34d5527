//! The closed crawl loop: query the service, extract triples, grow the
//! knowledge graph, and ask a [`CrawlPolicy`] for the next query, until the
//! budget runs out or the policy reports convergence.
//!
//! Policies are registered by name (see [`build_policy`]) and never see the
//! retrieval oracle; the runner alone reads it, for coverage accounting.

mod baselines;
mod ragcrawler;

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::CrawlConfig;
use crate::error::{Error, Result};
use crate::extract::Extractor;
use crate::kg::{IngestOutcome, KgSnapshot, KnowledgeGraph};
use crate::qgen::{bootstrap_query, QueryMode, QueryRecord};
use crate::sched::{AnchorPair, CacheCounters, ScoreBreakdown};
use crate::victim::{Answer, OracleRecord, RagService, Victim};

pub use baselines::{ContinuationBaseline, KeywordBaseline, RandomBaseline};
pub use ragcrawler::RagCrawler;

pub const POLICY_NAMES: &[&str] = &["ragcrawler", "random", "keyword", "continuation"];

/// A RAG service that also exposes the evaluation-only retrieval log.
pub trait InstrumentedService: RagService {
    fn last_oracle(&self) -> Option<&OracleRecord>;
    fn corpus_size(&self) -> usize;
}

impl InstrumentedService for Victim {
    fn last_oracle(&self) -> Option<&OracleRecord> {
        self.oracle().last()
    }

    fn corpus_size(&self) -> usize {
        Victim::corpus_size(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedQuery {
    pub text: String,
    pub mode: QueryMode,
    pub anchor: Option<AnchorPair>,
    pub anchor_name: Option<String>,
    pub trials: usize,
    pub breakdown: Option<ScoreBreakdown>,
}

impl PlannedQuery {
    pub fn bootstrap(topic: &str) -> Self {
        Self::plain(bootstrap_query(topic), QueryMode::Bootstrap)
    }

    pub fn plain(text: String, mode: QueryMode) -> Self {
        Self {
            text,
            mode,
            anchor: None,
            anchor_name: None,
            trials: 1,
            breakdown: None,
        }
    }
}

/// What a policy learns after a round.
pub struct Observation<'a> {
    pub round: usize,
    pub query: &'a PlannedQuery,
    pub answer: &'a Answer,
    /// Non-refused answer with no extractable content.
    pub empty: bool,
    pub ingest: &'a IngestOutcome,
    pub new_entities: usize,
    pub new_edges: usize,
}

pub trait CrawlPolicy {
    fn name(&self) -> &str;

    fn first_query(&mut self) -> PlannedQuery;

    fn observe(&mut self, obs: &Observation<'_>, kg: &KnowledgeGraph) -> Result<()>;

    /// `None` means the policy has converged.
    fn next_query(&mut self, round: usize, kg: &KnowledgeGraph) -> Result<Option<PlannedQuery>>;

    fn scheduler_rows(&self) -> &[SchedulerRow] {
        &[]
    }

    fn cache_counters(&self) -> Option<CacheCounters> {
        None
    }
}

pub fn build_policy(name: &str, cfg: &CrawlConfig) -> Result<Box<dyn CrawlPolicy>> {
    match name {
        "ragcrawler" => Ok(Box::new(RagCrawler::new(cfg)?)),
        "random" => Ok(Box::new(RandomBaseline::new(cfg))),
        "keyword" => Ok(Box::new(KeywordBaseline::new(cfg))),
        "continuation" => Ok(Box::new(ContinuationBaseline::new(cfg))),
        other => Err(Error::UnknownStrategy(format!("policy {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerRow {
    pub round: usize,
    pub anchor: String,
    pub relation: Option<String>,
    pub new_entities: usize,
    pub new_edges: usize,
    pub empirical_payoff: f64,
    pub graph_prior: f64,
    pub score: f64,
    pub cache_invalidations: u64,
    pub cache_hits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub query: String,
    pub mode: QueryMode,
    pub anchor: Option<String>,
    pub relation: Option<String>,
    pub trials: usize,
    pub answer: String,
    pub refused: bool,
    pub triples: Vec<[String; 3]>,
    pub new_entities: usize,
    pub new_edges: usize,
    pub merges: usize,
    /// Oracle-only: ids the service actually retrieved.
    pub retrieved: Vec<String>,
    pub coverage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrawlTrace {
    pub policy: String,
    pub seed: u64,
    pub corpus_size: usize,
    pub rounds: Vec<RoundRecord>,
    pub converged: bool,
    pub kg: KgSnapshot,
    pub scheduler: Vec<SchedulerRow>,
    pub cache: Option<CacheCounters>,
}

impl CrawlTrace {
    pub fn final_coverage(&self) -> f64 {
        self.rounds.last().map(|r| r.coverage).unwrap_or(0.0)
    }

    /// Coverage after `n` issued queries (the final value once the trace is shorter).
    pub fn coverage_at(&self, n: usize) -> f64 {
        match n {
            0 => 0.0,
            _ => self
                .rounds
                .get(n - 1)
                .or(self.rounds.last())
                .map(|r| r.coverage)
                .unwrap_or(0.0),
        }
    }

    pub fn is_monotone(&self) -> bool {
        self.rounds.windows(2).all(|w| w[0].coverage <= w[1].coverage)
    }

    /// Fact lines grouped per head entity, from every extracted triple.
    pub fn snippets(&self) -> Vec<String> {
        let mut by_head: std::collections::BTreeMap<&str, BTreeSet<String>> = Default::default();
        for r in &self.rounds {
            for [h, rel, t] in &r.triples {
                by_head.entry(h).or_default().insert(format!("{h} | {rel} | {t}"));
            }
        }
        by_head
            .into_values()
            .map(|lines| lines.into_iter().collect::<Vec<_>>().join("\n"))
            .collect()
    }

    pub fn query_log(&self) -> Vec<QueryRecord> {
        self.rounds
            .iter()
            .map(|r| QueryRecord {
                round: r.round,
                query: r.query.clone(),
                anchor: r.anchor.clone(),
                relation: r.relation.clone(),
                mode: r.mode,
                trials: r.trials,
            })
            .collect()
    }

    pub fn write_coverage_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "round,queries,coverage")?;
        for r in &self.rounds {
            writeln!(out, "{},{},{:.6}", r.round, r.round + 1, r.coverage)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_trace_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.rounds {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_scheduler_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            out,
            "round,anchor,relation,new_entities,new_edges,empirical_payoff,graph_prior,score,cache_invalidations,cache_hits"
        )?;
        for r in &self.scheduler {
            writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{},{}",
                r.round,
                r.anchor,
                r.relation.as_deref().unwrap_or("none"),
                r.new_entities,
                r.new_edges,
                r.empirical_payoff,
                r.graph_prior,
                r.score,
                r.cache_invalidations,
                r.cache_hits
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_kg_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.kg)?)?;
        Ok(())
    }
}

/// Runs `policy` against `service` for at most `cfg.budget` queries.
pub fn run_crawl(
    service: &mut dyn InstrumentedService,
    policy: &mut dyn CrawlPolicy,
    extractor: &dyn Extractor,
    cfg: &CrawlConfig,
) -> Result<CrawlTrace> {
    cfg.validate()?;
    let corpus_size = service.corpus_size();
    if corpus_size == 0 {
        return Err(Error::InvalidInput("service corpus is empty".into()));
    }
    let mut kg = KnowledgeGraph::new(cfg.schema.clone(), cfg.embedder.clone())?;
    let mut covered: BTreeSet<String> = BTreeSet::new();
    let mut rounds = Vec::new();
    let mut converged = false;
    let mut plan = policy.first_query();
    for round in 0..cfg.budget {
        let answer = service.answer(&plan.text)?;
        let retrieved = service.last_oracle().map(|o| o.retrieved.clone()).unwrap_or_default();
        let triples = if answer.refused {
            Vec::new()
        } else {
            extractor.extract(&answer.text, kg.schema()).triples
        };
        let (entities_before, edges_before) = (kg.entity_count(), kg.edge_count_total());
        let ingest = kg.ingest_triples(&triples, round)?;
        let merges = kg.semantic_merge_local(cfg.tau_merge, &ingest.touched);
        let new_entities = kg.entity_count().saturating_sub(entities_before);
        let new_edges = kg.edge_count_total().saturating_sub(edges_before);
        if !answer.refused {
            covered.extend(retrieved.iter().cloned());
        }
        let coverage = covered.len() as f64 / corpus_size as f64;
        if let Some(prev) = rounds.last().map(|r: &RoundRecord| r.coverage) {
            assert!(coverage >= prev, "coverage decreased at round {round}");
        }
        policy.observe(
            &Observation {
                round,
                query: &plan,
                answer: &answer,
                empty: !answer.refused && triples.is_empty(),
                ingest: &ingest,
                new_entities,
                new_edges,
            },
            &kg,
        )?;
        rounds.push(RoundRecord {
            round,
            query: plan.text.clone(),
            mode: plan.mode,
            anchor: plan.anchor_name.clone(),
            relation: plan.anchor.as_ref().and_then(|a| a.relation.clone()),
            trials: plan.trials,
            answer: answer.text,
            refused: answer.refused,
            triples: triples.into_iter().map(|t| [t.head, t.relation, t.tail]).collect(),
            new_entities,
            new_edges,
            merges,
            retrieved,
            coverage,
        });
        if round + 1 == cfg.budget {
            break;
        }
        match policy.next_query(round + 1, &kg)? {
            Some(p) => plan = p,
            None => {
                converged = true;
                break;
            }
        }
    }
    log::info!(
        "{} seed {}: {} rounds, coverage {:.4}",
        policy.name(),
        cfg.seed,
        rounds.len(),
        rounds.last().map(|r| r.coverage).unwrap_or(0.0)
    );
    Ok(CrawlTrace {
        policy: policy.name().to_string(),
        seed: cfg.seed,
        corpus_size,
        rounds,
        converged,
        kg: kg.to_snapshot(),
        scheduler: policy.scheduler_rows().to_vec(),
        cache: policy.cache_counters(),
    })
}

/// Runs the adaptive crawler.
pub fn run_attack(
    service: &mut dyn InstrumentedService,
    extractor: &dyn Extractor,
    cfg: &CrawlConfig,
) -> Result<CrawlTrace> {
    let mut policy = RagCrawler::new(cfg)?;
    run_crawl(service, &mut policy, extractor, cfg)
}

/// Runs one of the simplified baselines by registry name.
pub fn run_baseline(
    service: &mut dyn InstrumentedService,
    extractor: &dyn Extractor,
    cfg: &CrawlConfig,
    kind: &str,
) -> Result<CrawlTrace> {
    if kind == "ragcrawler" {
        return Err(Error::UnknownStrategy(format!("baseline {kind}")));
    }
    let mut policy = build_policy(kind, cfg)?;
    run_crawl(service, policy.as_mut(), extractor, cfg)
}
