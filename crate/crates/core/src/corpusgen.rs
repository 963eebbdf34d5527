//! Synthetic private corpora rendered from a hidden ground-truth graph.
//!
//! Every document is a title line, a filler sentence, and one canonical fact
//! line `head | relation | tail` per triple, so the closed loop can be checked
//! exactly against the generating triples.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Triple = (String, String, String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthKG {
    pub entities: Vec<(String, String)>,
    pub relations: Vec<String>,
    pub triples: Vec<Triple>,
    pub seed: u64,
}

impl GroundTruthKG {
    pub fn entity_type(&self, name: &str) -> Option<&str> {
        self.entities.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticDoc {
    pub id: String,
    pub title: String,
    pub text: String,
    /// Oracle-only; never handed to attacker-side code.
    pub facts: Vec<Triple>,
}

pub fn fact_line(h: &str, r: &str, t: &str) -> String {
    format!("{h} | {r} | {t}")
}

/// Entities are named `<type>_<index>` with per-type indices; types are
/// assigned round-robin. Each entity gets `triples_per_entity` distinct
/// outgoing triples whose relation and tail come from the seeded generator.
pub fn generate_ground_truth(
    seed: u64,
    n_entities: usize,
    entity_types: &[String],
    relation_vocab: &[String],
    triples_per_entity: usize,
) -> Result<GroundTruthKG> {
    if n_entities == 0 {
        return Err(Error::InvalidInput("n_entities must be at least 1".into()));
    }
    if entity_types.is_empty() || relation_vocab.is_empty() {
        return Err(Error::InvalidInput("vocabularies must be non-empty".into()));
    }
    let capacity = (n_entities - 1) * relation_vocab.len();
    if triples_per_entity > capacity {
        return Err(Error::InvalidInput(format!(
            "cannot draw {triples_per_entity} distinct triples per entity from {capacity} candidates"
        )));
    }

    let mut per_type = vec![0usize; entity_types.len()];
    let entities: Vec<(String, String)> = (0..n_entities)
        .map(|i| {
            let ti = i % entity_types.len();
            let name = format!("{}_{}", entity_types[ti], per_type[ti]);
            per_type[ti] += 1;
            (name, entity_types[ti].clone())
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::with_capacity(n_entities * triples_per_entity);
    for (hi, (head, _)) in entities.iter().enumerate() {
        let mut chosen = BTreeSet::new();
        while chosen.len() < triples_per_entity {
            let r = rng.gen_range(0..relation_vocab.len());
            let ti = rng.gen_range(0..n_entities);
            if ti == hi {
                continue;
            }
            if chosen.insert((r, ti)) {
                triples.push((head.clone(), relation_vocab[r].clone(), entities[ti].0.clone()));
            }
        }
    }
    Ok(GroundTruthKG {
        entities,
        relations: relation_vocab.to_vec(),
        triples,
        seed,
    })
}

const FILLER: &[&str] = &[
    "The following notes summarise what is recorded about {}.",
    "This record collects clinical observations concerning {}.",
    "Reference material describing {} is listed below.",
    "Case documentation for {} includes the statements that follow.",
];

fn group_by_head(kg: &GroundTruthKG) -> Vec<(String, Vec<Triple>)> {
    let order: BTreeMap<&str, usize> = kg
        .entities
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (n.as_str(), i))
        .collect();
    let mut groups: BTreeMap<usize, (String, Vec<Triple>)> = BTreeMap::new();
    for t in &kg.triples {
        let key = order.get(t.0.as_str()).copied().unwrap_or(usize::MAX);
        groups
            .entry(key)
            .or_insert_with(|| (t.0.clone(), Vec::new()))
            .1
            .push(t.clone());
    }
    groups.into_values().collect()
}

fn render(
    kg: &GroundTruthKG,
    facts_per_doc: usize,
    mut surface: impl FnMut(&str) -> String,
) -> Result<Vec<SyntheticDoc>> {
    if facts_per_doc == 0 {
        return Err(Error::InvalidInput("facts_per_doc must be positive".into()));
    }
    if kg.entities.is_empty() {
        return Err(Error::InvalidInput("ground truth has no entities".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(kg.seed ^ 0x5eed_d0c5);
    let mut docs = Vec::new();
    for (head, triples) in group_by_head(kg) {
        for (part, chunk) in triples.chunks(facts_per_doc).enumerate() {
            let title = if part == 0 {
                format!("Record on {head}")
            } else {
                format!("Record on {head} (part {})", part + 1)
            };
            let filler = FILLER.choose(&mut rng).expect("non-empty").replace("{}", &head);
            let mut text = format!("{title}\n{filler}");
            for (h, r, t) in chunk {
                text.push('\n');
                text.push_str(&fact_line(h, r, &surface(t)));
            }
            docs.push(SyntheticDoc {
                id: format!("doc_{:04}", docs.len()),
                title,
                text,
                facts: chunk.to_vec(),
            });
        }
    }
    Ok(docs)
}

/// Head-grouped partition: a head's triples fill consecutive documents of at
/// most `facts_per_doc` facts.
pub fn render_corpus(kg: &GroundTruthKG, facts_per_doc: usize) -> Result<Vec<SyntheticDoc>> {
    render(kg, facts_per_doc, str::to_string)
}

/// Like [`render_corpus`], but each tail mention is rendered with a plural
/// suffix with probability `p_alias`. `facts` keeps the canonical triples.
pub fn render_corpus_noisy(kg: &GroundTruthKG, facts_per_doc: usize, p_alias: f64) -> Result<Vec<SyntheticDoc>> {
    if !(0.0..=1.0).contains(&p_alias) {
        return Err(Error::InvalidInput(format!("p_alias {p_alias} not in [0,1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(kg.seed ^ 0xa11a_5000);
    render(kg, facts_per_doc, |name| {
        if rng.gen_bool(p_alias) {
            format!("{name}s")
        } else {
            name.to_string()
        }
    })
}

pub fn write_corpus_jsonl(docs: &[SyntheticDoc], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct CorpusRecord {
    id: String,
    #[serde(default)]
    title: String,
    text: String,
    #[serde(default)]
    facts: Vec<Triple>,
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<SyntheticDoc>> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line)?;
        docs.push(SyntheticDoc {
            id: rec.id,
            title: rec.title,
            text: rec.text,
            facts: rec.facts,
        });
    }
    Ok(docs)
}
