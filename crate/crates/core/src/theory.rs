//! Brute-force checks of the coverage objective on a tiny instance: monotone
//! and submodular under the retrieval oracle, and greedy within `1 - 1/e` of
//! the exhaustive optimum for short budgets.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::corpusgen::{generate_ground_truth, render_corpus, SyntheticDoc};
use crate::embed::Embedder;
use crate::error::{Error, Result};
use crate::kg::Schema;
use crate::victim::{Victim, VictimConfig};

pub const MAX_POOL: usize = 8;

/// Retrieved-document sets per candidate query; the exact coverage oracle.
#[derive(Debug, Clone)]
pub struct CoverageInstance {
    pub corpus_size: usize,
    pub queries: Vec<String>,
    pub retrieved: Vec<BTreeSet<usize>>,
}

impl CoverageInstance {
    pub fn from_victim(victim: &Victim, queries: Vec<String>) -> Result<Self> {
        if queries.is_empty() || queries.len() > MAX_POOL {
            return Err(Error::InvalidInput(format!(
                "query pool must hold 1..={MAX_POOL} queries"
            )));
        }
        let mut ids = BTreeSet::new();
        let mut lists = Vec::new();
        for q in &queries {
            let r = victim.retrieve(q, victim.config().k)?;
            ids.extend(r.iter().cloned());
            lists.push(r);
        }
        let index: Vec<String> = ids.into_iter().collect();
        let retrieved = lists
            .iter()
            .map(|r| r.iter().map(|id| index.binary_search(id).expect("indexed")).collect())
            .collect();
        Ok(Self {
            corpus_size: victim.corpus_size(),
            queries,
            retrieved,
        })
    }

    /// Unique documents covered by the queries in `mask`.
    pub fn coverage(&self, mask: u32) -> usize {
        let mut seen = BTreeSet::new();
        for (i, r) in self.retrieved.iter().enumerate() {
            if mask & (1 << i) != 0 {
                seen.extend(r.iter().copied());
            }
        }
        seen.len()
    }

    fn gain(&self, mask: u32, q: usize) -> isize {
        self.coverage(mask | (1 << q)) as isize - self.coverage(mask) as isize
    }

    /// Query indices chosen by exact marginal gain; ties go to the lower index.
    pub fn greedy(&self, budget: usize) -> Vec<usize> {
        let mut mask = 0u32;
        let mut picks = Vec::new();
        for _ in 0..budget.min(self.queries.len()) {
            let best = (0..self.queries.len())
                .filter(|q| mask & (1 << q) == 0)
                .max_by(|a, b| self.gain(mask, *a).cmp(&self.gain(mask, *b)).then(b.cmp(a)))
                .expect("unpicked query remains");
            mask |= 1 << best;
            picks.push(best);
        }
        picks
    }

    /// Exhaustive optimum over all query sets of size at most `budget`.
    pub fn optimum(&self, budget: usize) -> usize {
        (0u32..1 << self.queries.len())
            .filter(|m| m.count_ones() as usize <= budget)
            .map(|m| self.coverage(m))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn check_monotone(inst: &CoverageInstance) -> TheoryCheck {
    let n = inst.queries.len();
    let mut violations = 0usize;
    let mut checked = 0usize;
    for mask in 0u32..1 << n {
        for q in 0..n {
            if mask & (1 << q) == 0 {
                checked += 1;
                if inst.gain(mask, q) < 0 {
                    violations += 1;
                }
            }
        }
    }
    TheoryCheck {
        name: "monotonicity".into(),
        passed: violations == 0,
        detail: format!("{checked} extensions, {violations} violations"),
    }
}

/// Every `S ⊆ S'` and `q ∉ S'`: gain at `S` is at least gain at `S'`.
pub fn check_submodular(inst: &CoverageInstance) -> TheoryCheck {
    let n = inst.queries.len();
    let full = (1u32 << n) - 1;
    let mut violations = 0usize;
    let mut checked = 0usize;
    for big in 0..=full {
        // enumerate subsets of `big`
        let mut small = big;
        loop {
            for q in 0..n {
                if big & (1 << q) == 0 {
                    checked += 1;
                    if inst.gain(small, q) < inst.gain(big, q) {
                        violations += 1;
                    }
                }
            }
            if small == 0 {
                break;
            }
            small = (small - 1) & big;
        }
    }
    TheoryCheck {
        name: "submodularity".into(),
        passed: violations == 0,
        detail: format!("{checked} (S, S', q) triples, {violations} violations"),
    }
}

pub fn check_greedy_bound(inst: &CoverageInstance, max_budget: usize) -> TheoryCheck {
    let bound = 1.0 - (-1.0f64).exp();
    let mut worst = f64::INFINITY;
    let mut parts = Vec::new();
    let mut passed = true;
    for b in 1..=max_budget {
        let picks = inst.greedy(b);
        let mask = picks.iter().fold(0u32, |m, q| m | (1 << q));
        let g = inst.coverage(mask);
        let opt = inst.optimum(b);
        let ratio = if opt == 0 { 1.0 } else { g as f64 / opt as f64 };
        worst = worst.min(ratio);
        passed &= g as f64 >= bound * opt as f64;
        parts.push(format!("B={b}: greedy {g} opt {opt}"));
    }
    TheoryCheck {
        name: "greedy_bound".into(),
        passed,
        detail: format!("{}; worst ratio {worst:.4} vs {bound:.4}", parts.join(", ")),
    }
}

/// Bundled instance: 12 single-head documents, 8 entity queries, k = 3.
pub fn tiny_instance() -> Result<(Vec<SyntheticDoc>, Victim, Vec<String>)> {
    let schema = Schema::medical();
    let gt = generate_ground_truth(11, 12, &schema.entity_types, &schema.relation_types, 2)?;
    let docs = render_corpus(&gt, 2)?;
    let cfg = VictimConfig {
        k: 3,
        ..Default::default()
    };
    let victim = Victim::from_synthetic(&docs, Embedder::hashing(256, 0), cfg)?;
    let queries = gt
        .entities
        .iter()
        .take(MAX_POOL)
        .map(|(name, _)| format!("Tell me about {name}."))
        .collect();
    Ok((docs, victim, queries))
}

pub fn run_theory_suite() -> Result<Vec<TheoryCheck>> {
    let (_, victim, queries) = tiny_instance()?;
    let inst = CoverageInstance::from_victim(&victim, queries)?;
    Ok(vec![
        check_monotone(&inst),
        check_submodular(&inst),
        check_greedy_bound(&inst, 4),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(sets: &[&[usize]]) -> CoverageInstance {
        CoverageInstance {
            corpus_size: 10,
            queries: (0..sets.len()).map(|i| format!("q{i}")).collect(),
            retrieved: sets.iter().map(|s| s.iter().copied().collect()).collect(),
        }
    }

    #[test]
    fn tiny_instance_is_small() {
        let (docs, victim, queries) = tiny_instance().unwrap();
        assert!(docs.len() <= 20);
        assert_eq!(victim.corpus_size(), docs.len());
        assert_eq!(queries.len(), MAX_POOL);
    }

    #[test]
    fn suite_passes() {
        for c in run_theory_suite().unwrap() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn greedy_and_optimum_by_hand() {
        // classic greedy trap: {0..3} first, then two halves
        let inst = synthetic(&[&[0, 1, 2, 3], &[0, 1, 4], &[2, 3, 5]]);
        assert_eq!(inst.greedy(2), vec![0, 1]);
        assert_eq!(inst.coverage(0b011), 5);
        assert_eq!(inst.optimum(2), 6);
        assert!(check_greedy_bound(&inst, 3).passed);
    }

    #[test]
    fn empty_retrievals_are_degenerate() {
        let inst = synthetic(&[&[]]);
        assert!(check_monotone(&inst).passed);
        assert!(check_submodular(&inst).passed);
        assert_eq!(inst.optimum(1), 0);
    }
}
