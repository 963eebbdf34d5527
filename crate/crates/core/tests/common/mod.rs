#![allow(dead_code)]

use ragcrawl::config::CrawlConfig;
use ragcrawl::corpusgen::{generate_ground_truth, render_corpus, GroundTruthKG, SyntheticDoc};
use ragcrawl::embed::Embedder;
use ragcrawl::victim::Victim;

pub fn corpus(
    cfg: &CrawlConfig,
    seed: u64,
    n_entities: usize,
    per_entity: usize,
    facts_per_doc: usize,
) -> (GroundTruthKG, Vec<SyntheticDoc>) {
    let gt = generate_ground_truth(
        seed,
        n_entities,
        &cfg.schema.entity_types,
        &cfg.schema.relation_types,
        per_entity,
    )
    .unwrap();
    let docs = render_corpus(&gt, facts_per_doc).unwrap();
    (gt, docs)
}

pub fn victim(cfg: &CrawlConfig, docs: &[SyntheticDoc]) -> Victim {
    Victim::from_synthetic(
        docs,
        Embedder::hashing(cfg.embedder.dim, cfg.embedder.seed),
        cfg.victim_config(),
    )
    .unwrap()
}
