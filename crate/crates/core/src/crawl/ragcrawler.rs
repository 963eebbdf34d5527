use crate::config::CrawlConfig;
use crate::embed::embed_text;
use crate::error::Result;
use crate::kg::KnowledgeGraph;
use crate::qgen::{build_realizer, GenOutcome, QueryGenerator, QueryHistory};
use crate::sched::{CacheCounters, PenaltyReason, Scheduler};

use super::{CrawlPolicy, Observation, PlannedQuery, SchedulerRow};

/// Scheduler-driven crawler: anchors chosen by estimated marginal gain,
/// realized as relation probes or neighborhood queries.
pub struct RagCrawler {
    topic: String,
    sched: Scheduler,
    qgen: QueryGenerator,
    hist: QueryHistory,
    rows: Vec<SchedulerRow>,
    pending: CacheCounters,
}

impl RagCrawler {
    pub fn new(cfg: &CrawlConfig) -> Result<Self> {
        let qgen = QueryGenerator::new(
            build_realizer(&cfg.realizer)?,
            cfg.embedder.clone(),
            cfg.tau_dup,
            cfg.max_trials,
            cfg.seed,
        )?;
        Ok(Self {
            topic: cfg.topic.clone(),
            sched: Scheduler::new(cfg.scheduler_config()),
            qgen,
            hist: QueryHistory::new(),
            rows: Vec::new(),
            pending: CacheCounters::default(),
        })
    }

    /// Every cache-served score is compared against a from-scratch recomputation.
    pub fn with_audit(mut self) -> Self {
        self.sched = self.sched.with_audit();
        self
    }

    pub fn without_cache(mut self) -> Self {
        self.sched = self.sched.without_cache();
        self
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.sched
    }

    pub fn history(&self) -> &QueryHistory {
        &self.hist
    }
}

impl CrawlPolicy for RagCrawler {
    fn name(&self) -> &str {
        "ragcrawler"
    }

    fn first_query(&mut self) -> PlannedQuery {
        let q = PlannedQuery::bootstrap(&self.topic);
        if let Ok(v) = embed_text(&q.text, self.qgen.embed_spec()) {
            self.hist.push(q.text.clone(), v);
        }
        q
    }

    fn observe(&mut self, obs: &Observation<'_>, kg: &KnowledgeGraph) -> Result<()> {
        let Some(anchor) = &obs.query.anchor else {
            self.sched.observe_round(obs.new_entities, obs.new_edges);
            return Ok(());
        };
        // the anchor may have been merged into an earlier entity this round
        let e = obs
            .query
            .anchor_name
            .as_deref()
            .and_then(|n| kg.resolve(n))
            .unwrap_or(anchor.entity);
        let penalty = if obs.answer.refused {
            Some(PenaltyReason::Refusal)
        } else if obs.empty {
            Some(PenaltyReason::EmptyAnswer)
        } else {
            None
        };
        self.sched.record_outcome(e, obs.new_entities, obs.new_edges, penalty);
        let b = obs.query.breakdown.unwrap_or(crate::sched::ScoreBreakdown {
            empirical_payoff: 0.0,
            graph_prior: 0.0,
            score: 0.0,
        });
        self.rows.push(SchedulerRow {
            round: obs.round,
            anchor: obs.query.anchor_name.clone().unwrap_or_default(),
            relation: anchor.relation.clone(),
            new_entities: obs.new_entities,
            new_edges: obs.new_edges,
            empirical_payoff: b.empirical_payoff,
            graph_prior: b.graph_prior,
            score: b.score,
            cache_invalidations: self.pending.recomputations,
            cache_hits: self.pending.hits,
        });
        Ok(())
    }

    fn next_query(&mut self, round: usize, kg: &KnowledgeGraph) -> Result<Option<PlannedQuery>> {
        if kg.is_empty() {
            return Ok(Some(PlannedQuery::bootstrap(&self.topic)));
        }
        let outcome = self.qgen.next_query(&mut self.sched, kg, &mut self.hist, round)?;
        self.pending = self.sched.take_round_counters();
        Ok(match outcome {
            GenOutcome::Converged => None,
            GenOutcome::Query(q) => Some(PlannedQuery {
                text: q.text,
                mode: q.mode,
                anchor: Some(q.anchor),
                anchor_name: Some(q.anchor_name),
                trials: q.trials,
                breakdown: Some(q.breakdown),
            }),
        })
    }

    fn scheduler_rows(&self) -> &[SchedulerRow] {
        &self.rows
    }

    fn cache_counters(&self) -> Option<CacheCounters> {
        Some(self.sched.counters())
    }
}
