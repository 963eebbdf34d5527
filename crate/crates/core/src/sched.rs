//! Anchor scheduling: estimates each entity's conditional marginal gain from
//! an upper-confidence empirical payoff and a structural graph prior, samples
//! an anchor from a top-K softmax, and picks the relation with the largest
//! local deficit when that deficit is globally salient.
//!
//! Per-entity score components are cached and keyed on the graph's version
//! counters, so an entry is recomputed only after something it depends on has
//! changed. [`Scheduler::scores_fresh`] recomputes everything from scratch
//! through an independent code path and is used to audit the cache.

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};

pub const DEGREE_EPSILON: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub c: f64,
    pub budget: usize,
    pub alpha0: f64,
    pub beta: f64,
    pub top_k: usize,
    pub temperature: f64,
    pub window: usize,
    pub relation_percentile: f64,
    pub seed: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            c: 0.5,
            budget: 1000,
            alpha0: 0.5,
            beta: 0.5,
            top_k: 5,
            temperature: 1.0,
            window: 50,
            relation_percentile: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyReason {
    Duplicate,
    Refusal,
    EmptyAnswer,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityStats {
    pub n_e: usize,
    pub gain_samples: Vec<f64>,
    pub penalty_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorPair {
    pub entity: EntityId,
    pub relation: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreBreakdown {
    pub empirical_payoff: f64,
    pub graph_prior: f64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheCounters {
    /// Entity score components recomputed because their entry was missing or stale.
    pub recomputations: u64,
    pub hits: u64,
    /// Recomputations a cache-less scheduler would have performed.
    pub uncached_equivalent: u64,
    pub audit_mismatches: u64,
}

// ---------------------------------------------------------------------------
// formulas

pub fn normalized_gain(new_entities: usize, new_edges: usize, max_entities: usize, max_edges: usize) -> f64 {
    let term = |x: usize, m: usize| if m == 0 { 0.0 } else { x as f64 / m as f64 };
    term(new_entities, max_entities) + term(new_edges, max_edges)
}

pub fn mean_gain(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        0.0
    } else {
        samples.iter().sum::<f64>() / samples.len() as f64
    }
}

/// Confidence bonus `c * sqrt(ln N / (n_e + 1))`; `N` below 1 is treated as 1.
pub fn ucb_bonus(c: f64, total: usize, n_e: usize) -> f64 {
    let n = total.max(1) as f64;
    c * (n.ln() / (n_e as f64 + 1.0)).sqrt()
}

pub fn empirical_payoff(mean_gain: f64, c: f64, total: usize, n_e: usize) -> f64 {
    mean_gain + ucb_bonus(c, total, n_e)
}

pub fn degree_score(degree: usize, max_degree: usize) -> f64 {
    1.0 - degree as f64 / (max_degree as f64 + DEGREE_EPSILON)
}

pub fn alpha_at(t: usize, budget: usize, alpha0: f64) -> f64 {
    let progress = if budget == 0 {
        1.0
    } else {
        (t as f64 / budget as f64).min(1.0)
    };
    alpha0 + (1.0 - alpha0) * progress
}

pub fn composite(alpha: f64, payoff: f64, beta: f64, prior: f64) -> f64 {
    alpha * payoff + beta * prior
}

/// Nearest-rank percentile: the value at rank `ceil(p * n)` of the ascending sort.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    Some(sorted[rank - 1])
}

/// Mean `r`-edge count over `e`'s same-type peers (including `e`), or 0 when
/// `e` already has an `r` edge. Computed by walking the peer set.
pub fn deficit(g: &KnowledgeGraph, e: EntityId, r: &str) -> Result<f64> {
    let ent = g.entity(e).ok_or_else(|| Error::UnknownEntity(e.to_string()))?;
    if g.edge_count(e, r)? > 0 {
        return Ok(0.0);
    }
    let peers = g.peers(&ent.entity_type);
    let mut total = 0usize;
    for u in &peers {
        total += g.edge_count(*u, r)?;
    }
    Ok(total as f64 / peers.len() as f64)
}

/// Same value as [`deficit`], read from the graph's per-type relation totals.
fn deficit_indexed(g: &KnowledgeGraph, e: EntityId, entity_type: &str, r: &str) -> f64 {
    if g.has_edge_type(e, r) {
        return 0.0;
    }
    g.type_relation_total(entity_type, r) as f64 / g.type_population(entity_type) as f64
}

pub fn adj_score(g: &KnowledgeGraph, e: EntityId) -> Result<f64> {
    let mut best = 0.0f64;
    for r in g.relations() {
        best = best.max(deficit(g, e, &r)?);
    }
    Ok(best)
}

pub fn graph_prior(g: &KnowledgeGraph, e: EntityId) -> Result<f64> {
    Ok(degree_score(g.degree(e)?, g.max_degree()) + adj_score(g, e)?)
}

/// Samples from a softmax over the `k` best scores (ties by ascending id).
pub fn sample_top_k<R: Rng>(scores: &[(EntityId, f64)], k: usize, temperature: f64, rng: &mut R) -> Result<EntityId> {
    if scores.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k.max(1));
    let top = ranked[0].1;
    let weights: Vec<f64> = ranked.iter().map(|(_, s)| ((s - top) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Ok(ranked[0].0);
    }
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for ((id, _), w) in ranked.iter().zip(&weights) {
        acc += w;
        if u < acc {
            return Ok(*id);
        }
    }
    Ok(ranked[ranked.len() - 1].0)
}

// ---------------------------------------------------------------------------
// scheduler state

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Stamp {
    entity: u64,
    entity_type: u64,
    merge: u64,
}

#[derive(Debug, Clone)]
struct CacheEntry {
    stamp: Stamp,
    stats_version: u64,
    degree: usize,
    adj_score: f64,
    mean_gain: f64,
}

#[derive(Debug, Clone)]
pub struct Scheduler {
    cfg: SchedulerConfig,
    total_selections: usize,
    window: VecDeque<(usize, usize)>,
    stats: BTreeMap<EntityId, EntityStats>,
    stats_versions: BTreeMap<EntityId, u64>,
    cache: BTreeMap<EntityId, CacheEntry>,
    use_cache: bool,
    audit: bool,
    counters: CacheCounters,
    round_counters: CacheCounters,
    rng: ChaCha8Rng,
}

impl Scheduler {
    pub fn new(cfg: SchedulerConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            cfg,
            total_selections: 0,
            window: VecDeque::new(),
            stats: BTreeMap::new(),
            stats_versions: BTreeMap::new(),
            cache: BTreeMap::new(),
            use_cache: true,
            audit: false,
            counters: CacheCounters::default(),
            round_counters: CacheCounters::default(),
            rng,
        }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.cfg
    }

    /// Disables the score cache; every scoring call recomputes every entity.
    pub fn without_cache(mut self) -> Self {
        self.use_cache = false;
        self
    }

    /// Cross-checks every cache-served score against [`Self::scores_fresh`].
    pub fn with_audit(mut self) -> Self {
        self.audit = true;
        self
    }

    pub fn total_selections(&self) -> usize {
        self.total_selections
    }

    pub fn stats(&self, e: EntityId) -> Option<&EntityStats> {
        self.stats.get(&e)
    }

    pub fn counters(&self) -> CacheCounters {
        self.counters
    }

    /// Counters accumulated since the previous call.
    pub fn take_round_counters(&mut self) -> CacheCounters {
        std::mem::take(&mut self.round_counters)
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn window_max(&self) -> (usize, usize) {
        self.window
            .iter()
            .fold((0, 0), |(me, mr), (e, r)| (me.max(*e), mr.max(*r)))
    }

    /// Pushes a round's deltas into the sliding window without crediting an anchor.
    pub fn observe_round(&mut self, new_entities: usize, new_edges: usize) {
        self.window.push_back((new_entities, new_edges));
        while self.window.len() > self.cfg.window.max(1) {
            self.window.pop_front();
        }
    }

    pub fn mean_gain(&self, e: EntityId) -> f64 {
        self.stats.get(&e).map(|s| mean_gain(&s.gain_samples)).unwrap_or(0.0)
    }

    pub fn empirical_payoff(&self, e: EntityId) -> f64 {
        let n_e = self.stats.get(&e).map(|s| s.n_e).unwrap_or(0);
        empirical_payoff(self.mean_gain(e), self.cfg.c, self.total_selections, n_e)
    }

    /// Credits `e` with a round's outcome. A penalized outcome counts as a
    /// selection with zero gain.
    pub fn record_outcome(
        &mut self,
        e: EntityId,
        new_entities: usize,
        new_edges: usize,
        penalty: Option<PenaltyReason>,
    ) {
        self.observe_round(new_entities, new_edges);
        let (max_e, max_r) = self.window_max();
        let stats = self.stats.entry(e).or_default();
        stats.n_e += 1;
        let sample = match penalty {
            Some(_) => {
                stats.penalty_count += 1;
                0.0
            }
            None => normalized_gain(new_entities, new_edges, max_e, max_r),
        };
        stats.gain_samples.push(sample);
        self.total_selections += 1;
        *self.stats_versions.entry(e).or_insert(0) += 1;
    }

    pub fn apply_penalty(&mut self, e: EntityId, reason: PenaltyReason) {
        log::debug!("penalty {reason:?} for entity {e}");
        self.record_outcome(e, 0, 0, Some(reason));
    }

    fn stamp(g: &KnowledgeGraph, e: EntityId, entity_type: &str) -> Stamp {
        Stamp {
            entity: g.entity_version(e),
            entity_type: g.type_version(entity_type),
            merge: g.merge_epoch(),
        }
    }

    fn compute_entry(&self, g: &KnowledgeGraph, e: EntityId, entity_type: &str, relations: &[String]) -> CacheEntry {
        let adj = relations
            .iter()
            .map(|r| deficit_indexed(g, e, entity_type, r))
            .fold(0.0f64, f64::max);
        CacheEntry {
            stamp: Self::stamp(g, e, entity_type),
            stats_version: self.stats_versions.get(&e).copied().unwrap_or(0),
            degree: g.degree(e).unwrap_or(0),
            adj_score: adj,
            mean_gain: self.mean_gain(e),
        }
    }

    fn assemble(&self, t: usize, max_degree: usize, e: EntityId, degree: usize, adj: f64, gain: f64) -> ScoreBreakdown {
        let n_e = self.stats.get(&e).map(|s| s.n_e).unwrap_or(0);
        let ep = empirical_payoff(gain, self.cfg.c, self.total_selections, n_e);
        let gp = degree_score(degree, max_degree) + adj;
        let alpha = alpha_at(t, self.cfg.budget, self.cfg.alpha0);
        ScoreBreakdown {
            empirical_payoff: ep,
            graph_prior: gp,
            score: composite(alpha, ep, self.cfg.beta, gp),
        }
    }

    /// Scores of every entity at step `t`, served from the cache where valid.
    pub fn scores(&mut self, g: &KnowledgeGraph, t: usize) -> Vec<(EntityId, ScoreBreakdown)> {
        let relations = g.relations();
        let max_degree = g.max_degree();
        let mut out = Vec::with_capacity(g.entity_count());
        let mut round = CacheCounters::default();
        for ent in g.entities() {
            let e = ent.id;
            round.uncached_equivalent += 1;
            let valid = self.use_cache
                && self.cache.get(&e).is_some_and(|c| {
                    c.stamp == Self::stamp(g, e, &ent.entity_type)
                        && c.stats_version == self.stats_versions.get(&e).copied().unwrap_or(0)
                });
            if valid {
                round.hits += 1;
            } else {
                round.recomputations += 1;
                let entry = self.compute_entry(g, e, &ent.entity_type, &relations);
                self.cache.insert(e, entry);
            }
            let c = &self.cache[&e];
            out.push((e, self.assemble(t, max_degree, e, c.degree, c.adj_score, c.mean_gain)));
        }
        self.cache.retain(|id, _| g.entity(*id).is_some());
        if self.audit {
            let fresh = self.scores_fresh(g, t);
            for ((a, sa), (b, sb)) in out.iter().zip(&fresh) {
                if a != b || sa.score.to_bits() != sb.score.to_bits() {
                    round.audit_mismatches += 1;
                }
            }
            if out.len() != fresh.len() {
                round.audit_mismatches += 1;
            }
        }
        for c in [&mut self.counters, &mut self.round_counters] {
            c.recomputations += round.recomputations;
            c.hits += round.hits;
            c.uncached_equivalent += round.uncached_equivalent;
            c.audit_mismatches += round.audit_mismatches;
        }
        out
    }

    /// From-scratch scores through the peer-walking formulas; touches no cache.
    pub fn scores_fresh(&self, g: &KnowledgeGraph, t: usize) -> Vec<(EntityId, ScoreBreakdown)> {
        let max_degree = g.max_degree();
        g.entity_ids()
            .map(|e| {
                let degree = g.degree(e).expect("entity exists");
                let adj = adj_score(g, e).expect("entity exists");
                (e, self.assemble(t, max_degree, e, degree, adj, self.mean_gain(e)))
            })
            .collect()
    }

    pub fn sample_anchor(&mut self, g: &KnowledgeGraph, t: usize) -> Result<(EntityId, ScoreBreakdown)> {
        let scored = self.scores(g, t);
        let flat: Vec<(EntityId, f64)> = scored.iter().map(|(e, s)| (*e, s.score)).collect();
        let (k, temp) = (self.cfg.top_k, self.cfg.temperature);
        let chosen = sample_top_k(&flat, k, temp, &mut self.rng)?;
        let breakdown = scored
            .iter()
            .find(|(e, _)| *e == chosen)
            .map(|(_, s)| *s)
            .expect("chosen entity was scored");
        Ok((chosen, breakdown))
    }

    /// Largest-deficit missing relation of `e`, if it is positive and reaches
    /// the configured percentile of all current (entity, missing relation) deficits.
    pub fn select_relation(&self, g: &KnowledgeGraph, e: EntityId) -> Result<Option<String>> {
        let ent = g.entity(e).ok_or_else(|| Error::UnknownEntity(e.to_string()))?;
        let relations = g.relations();
        let mut best: Option<(String, f64)> = None;
        for r in &relations {
            if g.has_edge_type(e, r) {
                continue;
            }
            let d = deficit_indexed(g, e, &ent.entity_type, r);
            if best.as_ref().is_none_or(|(_, b)| d > *b) {
                best = Some((r.clone(), d));
            }
        }
        let Some((r_star, d_star)) = best else { return Ok(None) };
        if d_star <= 0.0 {
            return Ok(None);
        }
        let mut pool = Vec::new();
        for u in g.entities() {
            for r in &relations {
                if !g.has_edge_type(u.id, r) {
                    pool.push(deficit_indexed(g, u.id, &u.entity_type, r));
                }
            }
        }
        let gate = nearest_rank_percentile(&pool, self.cfg.relation_percentile).unwrap_or(0.0);
        Ok((d_star >= gate).then_some(r_star))
    }
}
