//! Simulated black-box RAG service.
//!
//! Retrieval is exact cosine top-k over the embedded corpus; generation is a
//! leaky extractive channel that passes each fact line of each retrieved
//! document through with probability `p_leak`. A [`RetrievalOracle`] records
//! what was actually retrieved each round. Attacker-side code only ever sees
//! the [`RagService`] trait, which exposes answers and nothing else.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpusgen::SyntheticDoc;
use crate::embed::{Embedder, VectorIndex};
use crate::error::{Error, Result};

pub const REFUSAL_TEXT: &str = "I'm sorry, but I can't help with that request.";
pub const NO_INFO_TEXT: &str = "I could not find specific information about that in the records.";
pub const ANSWER_PREAMBLE: &str = "Based on the retrieved records:";

const IMPERATIVE_PREFIXES: &[&str] = &[
    "ignore previous instructions",
    "ignore previous",
    "please",
    "tell me",
    "repeat",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VictimMode {
    #[default]
    Vanilla,
    Rewrite,
    MultiQuery,
}

impl std::str::FromStr for VictimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "rewrite" => Ok(Self::Rewrite),
            "multi_query" | "multi-query" => Ok(Self::MultiQuery),
            other => Err(Error::Config(format!("unknown victim mode {other:?}"))),
        }
    }
}

pub fn default_refusal_patterns() -> Vec<String> {
    [
        r"\bverbatim\b",
        r"\brepeat\b",
        r"\bignore (all )?(the )?previous\b",
        r"\ball (the )?documents\b",
        r"\bsystem prompt\b",
        r"\bword for word\b",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimConfig {
    pub k: usize,
    pub p_leak: f64,
    pub mode: VictimMode,
    pub n_subqueries: usize,
    pub rrf_constant: f64,
    pub refusal_patterns: Vec<String>,
    pub seed: u64,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            k: 10,
            p_leak: 1.0,
            mode: VictimMode::Vanilla,
            n_subqueries: 3,
            rrf_constant: 60.0,
            refusal_patterns: default_refusal_patterns(),
            seed: 0,
        }
    }
}

impl VictimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("victim k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.p_leak) {
            return Err(Error::Config(format!("p_leak {} not in [0,1]", self.p_leak)));
        }
        if self.mode == VictimMode::MultiQuery && self.n_subqueries == 0 {
            return Err(Error::Config("n_subqueries must be at least 1".into()));
        }
        if self.rrf_constant <= 0.0 {
            return Err(Error::Config("rrf_constant must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub refused: bool,
}

impl Answer {
    pub fn refusal() -> Self {
        Self {
            text: REFUSAL_TEXT.to_string(),
            refused: true,
        }
    }
}

/// What an attacker can reach: a question in, an answer out.
pub trait RagService {
    fn answer(&mut self, query: &str) -> Result<Answer>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub round: usize,
    pub retrieved: Vec<String>,
    pub refused: bool,
}

/// Append-only evaluation log of true retrieved sets.
#[derive(Debug, Clone, Default)]
pub struct RetrievalOracle {
    records: Vec<OracleRecord>,
}

impl RetrievalOracle {
    fn push(&mut self, rec: OracleRecord) {
        self.records.push(rec);
    }

    pub fn records(&self) -> &[OracleRecord] {
        &self.records
    }

    pub fn last(&self) -> Option<&OracleRecord> {
        self.records.last()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &self.records {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Document {
    pub id: String,
    pub text: String,
}

impl From<&SyntheticDoc> for Document {
    fn from(d: &SyntheticDoc) -> Self {
        Self {
            id: d.id.clone(),
            text: d.text.clone(),
        }
    }
}

/// A line reads as a fact when it splits on `|` into three non-empty parts.
pub fn is_fact_line(line: &str) -> bool {
    let parts: Vec<&str> = line.split('|').collect();
    parts.len() == 3 && parts.iter().all(|p| !p.trim().is_empty())
}

pub fn fact_lines(text: &str) -> impl Iterator<Item = &str> {
    text.lines().filter(|l| is_fact_line(l))
}

/// Σ 1/(constant + rank) over the lists containing each id, rank from 1;
/// sorted by score descending then id ascending.
pub fn rrf_fuse(rankings: &[Vec<String>], constant: f64) -> Vec<String> {
    rrf_scores(rankings, constant).into_iter().map(|(id, _)| id).collect()
}

pub fn rrf_scores(rankings: &[Vec<String>], constant: f64) -> Vec<(String, f64)> {
    let mut scores: BTreeMap<&str, f64> = BTreeMap::new();
    for ranking in rankings {
        for (i, id) in ranking.iter().enumerate() {
            *scores.entry(id.as_str()).or_insert(0.0) += 1.0 / (constant + (i + 1) as f64);
        }
    }
    let mut out: Vec<(String, f64)> = scores.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    // BTreeMap order is id-ascending; the stable sort keeps it among ties
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    out
}

pub fn compile_patterns(patterns: &[String]) -> Result<Vec<Regex>> {
    patterns
        .iter()
        .map(|p| Regex::new(&format!("(?i){p}")).map_err(Error::from))
        .collect()
}

/// Rule-based stand-in for an LLM query rewriter.
pub fn rewrite_query(query: &str, refusal: &[Regex]) -> String {
    let mut q = query.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let before = q.len();
        for prefix in IMPERATIVE_PREFIXES {
            if let Some(rest) = q.strip_prefix(prefix) {
                if rest.is_empty() || rest.starts_with(|c: char| c.is_whitespace() || c.is_ascii_punctuation()) {
                    q = rest
                        .trim_start_matches(|c: char| c.is_whitespace() || c == ',')
                        .to_string();
                }
            }
        }
        if q.len() == before {
            break;
        }
    }
    for re in refusal {
        q = re.replace_all(&q, " ").into_owned();
    }
    let q = q.split_whitespace().collect::<Vec<_>>().join(" ");
    if q.chars().any(char::is_alphanumeric) {
        q
    } else {
        "information".to_string()
    }
}

fn mix(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for p in parts {
        h ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    }
    h
}

fn str_key(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3)
    })
}

pub struct Victim {
    docs: HashMap<String, Document>,
    index: VectorIndex,
    embedder: Embedder,
    cfg: VictimConfig,
    refusal: Vec<Regex>,
    oracle: RetrievalOracle,
    round: usize,
}

impl Victim {
    pub fn new(docs: Vec<Document>, embedder: Embedder, cfg: VictimConfig) -> Result<Self> {
        cfg.validate()?;
        if docs.is_empty() {
            return Err(Error::InvalidInput("victim corpus is empty".into()));
        }
        let mut entries = Vec::with_capacity(docs.len());
        for d in &docs {
            entries.push((d.id.clone(), embedder.embed(&d.text)?));
        }
        let index = VectorIndex::new(embedder.dim(), entries)?;
        let refusal = compile_patterns(&cfg.refusal_patterns)?;
        Ok(Self {
            docs: docs.into_iter().map(|d| (d.id.clone(), d)).collect(),
            index,
            embedder,
            cfg,
            refusal,
            oracle: RetrievalOracle::default(),
            round: 0,
        })
    }

    pub fn from_synthetic(docs: &[SyntheticDoc], embedder: Embedder, cfg: VictimConfig) -> Result<Self> {
        Self::new(docs.iter().map(Document::from).collect(), embedder, cfg)
    }

    pub fn config(&self) -> &VictimConfig {
        &self.cfg
    }

    pub fn corpus_size(&self) -> usize {
        self.docs.len()
    }

    pub fn oracle(&self) -> &RetrievalOracle {
        &self.oracle
    }

    pub fn rounds_served(&self) -> usize {
        self.round
    }

    pub fn is_refused(&self, query: &str) -> bool {
        self.refusal.iter().any(|re| re.is_match(query))
    }

    pub fn rewrite_query(&self, query: &str) -> String {
        rewrite_query(query, &self.refusal)
    }

    pub fn retrieve(&self, query: &str, k: usize) -> Result<Vec<String>> {
        if query.trim().is_empty() {
            return Err(Error::EmptyQuery);
        }
        let q = self.embedder.embed(query)?;
        Ok(self.index.top_k(&q, k)?.into_iter().map(|(id, _)| id).collect())
    }

    /// The original query plus `n_subqueries - 1` seeded token-dropout variants.
    pub fn query_variants(&self, query: &str) -> Vec<String> {
        let tokens: Vec<&str> = query.split_whitespace().collect();
        let mut out = vec![query.to_string()];
        for i in 1..self.cfg.n_subqueries {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.cfg.seed, str_key(query), i as u64]));
            let kept: Vec<&str> = tokens.iter().copied().filter(|_| rng.gen_bool(0.7)).collect();
            if kept.is_empty() {
                out.push(query.to_string());
            } else {
                out.push(kept.join(" "));
            }
        }
        out
    }

    pub fn multi_query_retrieve(&self, query: &str) -> Result<Vec<String>> {
        if query.trim().is_empty() {
            return Err(Error::EmptyQuery);
        }
        let rankings = self
            .query_variants(query)
            .iter()
            .map(|v| self.retrieve(v, self.cfg.k))
            .collect::<Result<Vec<_>>>()?;
        let mut fused = rrf_fuse(&rankings, self.cfg.rrf_constant);
        fused.truncate(self.cfg.k);
        Ok(fused)
    }

    /// Leaky extractive generation over the given retrieved ids.
    pub fn generate(&self, query: &str, retrieved: &[String], round: usize) -> Answer {
        if self.is_refused(query) {
            return Answer::refusal();
        }
        let mut lines = Vec::new();
        for id in retrieved {
            let Some(doc) = self.docs.get(id) else { continue };
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[self.cfg.seed, round as u64, str_key(id)]));
            for line in fact_lines(&doc.text) {
                if rng.gen_bool(self.cfg.p_leak) {
                    lines.push(line.trim());
                }
            }
        }
        let text = if lines.is_empty() {
            NO_INFO_TEXT.to_string()
        } else {
            format!("{ANSWER_PREAMBLE}\n{}", lines.join("\n"))
        };
        Answer { text, refused: false }
    }

    fn retrieve_for_mode(&self, query: &str) -> Result<Vec<String>> {
        match self.cfg.mode {
            VictimMode::Vanilla => self.retrieve(query, self.cfg.k),
            VictimMode::Rewrite => self.retrieve(&self.rewrite_query(query), self.cfg.k),
            VictimMode::MultiQuery => self.multi_query_retrieve(query),
        }
    }
}

impl RagService for Victim {
    fn answer(&mut self, query: &str) -> Result<Answer> {
        let query = query.trim();
        if query.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let retrieved = self.retrieve_for_mode(query)?;
        let answer = self.generate(query, &retrieved, self.round);
        self.oracle.push(OracleRecord {
            round: self.round,
            retrieved,
            refused: answer.refused,
        });
        self.round += 1;
        Ok(answer)
    }
}
