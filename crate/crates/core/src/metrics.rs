//! Evaluation of crawl traces and extracted knowledge.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpusgen::SyntheticDoc;
use crate::crawl::CrawlTrace;
use crate::embed::{cosine, tokenize, Embedder};
use crate::error::{Error, Result};
use crate::victim::{Document, RagService, Victim, VictimConfig};

/// Fraction of the corpus retrieved at least once in a non-refused round.
pub fn coverage_rate(trace: &CrawlTrace, corpus_size: usize) -> f64 {
    if corpus_size == 0 {
        return 0.0;
    }
    let seen: BTreeSet<&str> = trace
        .rounds
        .iter()
        .filter(|r| !r.refused)
        .flat_map(|r| r.retrieved.iter().map(String::as_str))
        .collect();
    seen.len() as f64 / corpus_size as f64
}

/// Mean over documents of the best cosine against any snippet.
pub fn semantic_fidelity(corpus: &[String], snippets: &[String], embedder: &Embedder) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidInput("corpus must be non-empty".into()));
    }
    let snip: Vec<_> = snippets
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| embedder.embed(s))
        .collect::<Result<_>>()?;
    if snip.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for d in corpus {
        let v = embedder.embed(d)?;
        let best = snip
            .iter()
            .map(|s| cosine(&v, s))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(f64::NEG_INFINITY, f64::max);
        total += best.max(0.0);
    }
    Ok(total / corpus.len() as f64)
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token-level LCS F1.
pub fn rouge_l(reference: &str, candidate: &str) -> f64 {
    let r = tokenize(reference);
    let c = tokenize(candidate);
    if r.is_empty() || c.is_empty() {
        return 0.0;
    }
    let l = lcs_len(&r, &c) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / c.len() as f64;
    let rec = l / r.len() as f64;
    2.0 * p * rec / (p + rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub success_rate: f64,
    pub similarity: f64,
    pub rouge_l: f64,
    pub comparable_pairs: usize,
}

/// Builds a surrogate service over `snippets` (one document each) with the
/// victim's configuration and compares its answers with the victim's.
pub fn reconstruction_fidelity(
    snippets: &[String],
    victim: &mut dyn RagService,
    victim_cfg: &VictimConfig,
    embedder: &Embedder,
    eval_queries: &[String],
) -> Result<Reconstruction> {
    if snippets.is_empty() || eval_queries.is_empty() {
        return Err(Error::InvalidInput("need snippets and evaluation queries".into()));
    }
    let docs = snippets
        .iter()
        .enumerate()
        .map(|(i, s)| Document {
            id: format!("s_{i:05}"),
            text: s.clone(),
        })
        .collect();
    let mut surrogate = Victim::new(docs, embedder.clone(), victim_cfg.clone())?;
    let (mut ok, mut pairs, mut sim, mut rouge) = (0usize, 0usize, 0.0, 0.0);
    for q in eval_queries {
        let s = surrogate.answer(q)?;
        let v = victim.answer(q)?;
        if !s.refused {
            ok += 1;
        }
        if !s.refused && !v.refused {
            pairs += 1;
            sim += cosine(&embedder.embed(&s.text)?, &embedder.embed(&v.text)?)?;
            rouge += rouge_l(&v.text, &s.text);
        }
    }
    if pairs == 0 {
        log::warn!("no comparable answer pairs; similarity and ROUGE-L reported as 0");
    }
    let n = pairs.max(1) as f64;
    Ok(Reconstruction {
        success_rate: ok as f64 / eval_queries.len() as f64,
        similarity: (sim / n).clamp(0.0, 1.0),
        rouge_l: rouge / n,
        comparable_pairs: pairs,
    })
}

/// One "What is known about <head>?" query per document, first `n` by id.
pub fn eval_queries(docs: &[SyntheticDoc], n: usize) -> Vec<String> {
    let mut heads = BTreeSet::new();
    let mut out = Vec::new();
    for d in docs {
        if out.len() == n {
            break;
        }
        if let Some((h, _, _)) = d.facts.first() {
            if heads.insert(h.clone()) {
                out.push(format!("What is known about {h}?"));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub coverage_rate: f64,
    pub semantic_fidelity: f64,
    pub reconstruction: Option<Reconstruction>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
