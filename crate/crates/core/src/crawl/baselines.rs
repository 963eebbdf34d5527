//! Simplified comparison crawlers. None of them keeps a graph-driven plan.

use std::collections::BTreeSet;

use rand::seq::IteratorRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::CrawlConfig;
use crate::embed::tokenize;
use crate::error::Result;
use crate::kg::KnowledgeGraph;
use crate::qgen::QueryMode;
use crate::victim::fact_lines;

use super::{CrawlPolicy, Observation, PlannedQuery};

/// Tokens of the answer's fact lines, or of the whole text when it has none.
fn answer_tokens(text: &str) -> BTreeSet<String> {
    let facts: Vec<&str> = fact_lines(text).collect();
    let source = if facts.is_empty() {
        text.to_string()
    } else {
        facts.join("\n")
    };
    tokenize(&source).into_iter().filter(|t| t.len() > 1).collect()
}

/// Queries a uniformly drawn word from everything the service has said so far.
pub struct RandomBaseline {
    topic: String,
    rng: ChaCha8Rng,
    vocab: BTreeSet<String>,
}

impl RandomBaseline {
    pub fn new(cfg: &CrawlConfig) -> Self {
        Self {
            topic: cfg.topic.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5241_4e44),
            vocab: BTreeSet::new(),
        }
    }
}

impl CrawlPolicy for RandomBaseline {
    fn name(&self) -> &str {
        "random"
    }

    fn first_query(&mut self) -> PlannedQuery {
        PlannedQuery::bootstrap(&self.topic)
    }

    fn observe(&mut self, obs: &Observation<'_>, _kg: &KnowledgeGraph) -> Result<()> {
        if !obs.answer.refused {
            self.vocab
                .extend(tokenize(&obs.answer.text).into_iter().filter(|t| t.len() > 1));
        }
        Ok(())
    }

    fn next_query(&mut self, _round: usize, _kg: &KnowledgeGraph) -> Result<Option<PlannedQuery>> {
        Ok(Some(match self.vocab.iter().choose(&mut self.rng) {
            Some(w) => PlannedQuery::plain(format!("Tell me about {w}."), QueryMode::Random),
            None => PlannedQuery::bootstrap(&self.topic),
        }))
    }
}

/// Asks about a seeded keyword from the previous answer.
pub struct KeywordBaseline {
    topic: String,
    rng: ChaCha8Rng,
    last: BTreeSet<String>,
}

impl KeywordBaseline {
    pub fn new(cfg: &CrawlConfig) -> Self {
        Self {
            topic: cfg.topic.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4b45_5957),
            last: BTreeSet::new(),
        }
    }
}

impl CrawlPolicy for KeywordBaseline {
    fn name(&self) -> &str {
        "keyword"
    }

    fn first_query(&mut self) -> PlannedQuery {
        PlannedQuery::bootstrap(&self.topic)
    }

    fn observe(&mut self, obs: &Observation<'_>, _kg: &KnowledgeGraph) -> Result<()> {
        self.last = if obs.answer.refused || obs.empty {
            BTreeSet::new()
        } else {
            answer_tokens(&obs.answer.text)
        };
        Ok(())
    }

    fn next_query(&mut self, _round: usize, _kg: &KnowledgeGraph) -> Result<Option<PlannedQuery>> {
        Ok(Some(match self.last.iter().choose(&mut self.rng) {
            Some(kw) => PlannedQuery::plain(format!("What do you know about {kw}?"), QueryMode::Keyword),
            None => PlannedQuery::bootstrap(&self.topic),
        }))
    }
}

/// Feeds the last line of the previous answer back as the next query.
pub struct ContinuationBaseline {
    topic: String,
    last_line: Option<String>,
}

impl ContinuationBaseline {
    pub fn new(cfg: &CrawlConfig) -> Self {
        Self {
            topic: cfg.topic.clone(),
            last_line: None,
        }
    }
}

impl CrawlPolicy for ContinuationBaseline {
    fn name(&self) -> &str {
        "continuation"
    }

    fn first_query(&mut self) -> PlannedQuery {
        PlannedQuery::bootstrap(&self.topic)
    }

    fn observe(&mut self, obs: &Observation<'_>, _kg: &KnowledgeGraph) -> Result<()> {
        self.last_line = if obs.answer.refused {
            None
        } else {
            obs.answer
                .text
                .lines()
                .map(str::trim)
                .rfind(|l| !l.is_empty())
                .map(str::to_string)
        };
        Ok(())
    }

    fn next_query(&mut self, _round: usize, _kg: &KnowledgeGraph) -> Result<Option<PlannedQuery>> {
        Ok(Some(match &self.last_line {
            Some(l) => PlannedQuery::plain(l.clone(), QueryMode::Continuation),
            None => PlannedQuery::bootstrap(&self.topic),
        }))
    }
}
