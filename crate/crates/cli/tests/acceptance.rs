//! Acceptance suite: one PASS/FAIL line per criterion; exits nonzero if any fail.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ragcrawl::config::CrawlConfig;
use ragcrawl::corpusgen::{generate_ground_truth, render_corpus, SyntheticDoc};
use ragcrawl::crawl::{build_policy, run_crawl, CrawlTrace, RagCrawler};
use ragcrawl::embed::{Embedder, EmbedderSpec};
use ragcrawl::extract::RuleExtractor;
use ragcrawl::kg::{KnowledgeGraph, Schema, TypedTriple};
use ragcrawl::metrics::rouge_l;
use ragcrawl::sched::{
    alpha_at, composite, deficit, degree_score, empirical_payoff, nearest_rank_percentile, Scheduler, SchedulerConfig,
};
use ragcrawl::theory::run_theory_suite;
use ragcrawl::victim::{rrf_scores, Victim, VictimMode};

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const BUDGET: usize = 200;
/// 90% of the attack-minus-baseline mean coverage gaps measured at k = 5.
const MIN_GAP: [(&str, f64); 3] = [("random", 0.0018), ("keyword", 0.0756), ("continuation", 0.6858)];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn benchmark_corpus() -> Vec<SyntheticDoc> {
    let s = Schema::medical();
    let gt = generate_ground_truth(0, 100, &s.entity_types, &s.relation_types, 4).unwrap();
    render_corpus(&gt, 4).unwrap()
}

fn victim(cfg: &CrawlConfig, docs: &[SyntheticDoc]) -> Victim {
    Victim::from_synthetic(
        docs,
        Embedder::hashing(cfg.embedder.dim, cfg.embedder.seed),
        cfg.victim_config(),
    )
    .unwrap()
}

fn crawl(cfg: &CrawlConfig, docs: &[SyntheticDoc], policy: &str) -> CrawlTrace {
    let mut v = victim(cfg, docs);
    let mut p = build_policy(policy, cfg).unwrap();
    run_crawl(&mut v, p.as_mut(), &RuleExtractor, cfg).unwrap()
}

fn mean_coverage(docs: &[SyntheticDoc], policy: &str, k: usize) -> f64 {
    let total: f64 = SEEDS
        .iter()
        .map(|&seed| {
            crawl(
                &CrawlConfig {
                    budget: BUDGET,
                    k,
                    seed,
                    ..Default::default()
                },
                docs,
                policy,
            )
            .final_coverage()
        })
        .sum();
    total / SEEDS.len() as f64
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let checks = run_theory_suite().unwrap();
    let elapsed = start.elapsed();
    let ok = checks.iter().all(|c| c.passed) && elapsed < Duration::from_secs(60);
    let names: Vec<String> = checks.iter().map(|c| format!("{}={}", c.name, c.passed)).collect();
    outcome(ok, format!("{} in {:.2}s", names.join(" "), elapsed.as_secs_f64()))
}

fn tt(h: &str, r: &str, t: &str) -> TypedTriple {
    let ty = |n: &str| n.rsplit_once('_').unwrap().0.to_string();
    TypedTriple {
        head: h.into(),
        relation: r.into(),
        tail: t.into(),
        head_type: ty(h),
        tail_type: ty(t),
    }
}

fn criterion_2() -> Outcome {
    let mut fails = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            fails.push(name.to_string());
        }
    };
    check("ucb", (empirical_payoff(0.4, 0.5, 100, 3) - 0.93649).abs() < 1e-4);
    check("ucb_trivial", empirical_payoff(0.0, 0.5, 1, 0) == 0.0);

    let mut g = KnowledgeGraph::new(Schema::medical(), EmbedderSpec::default()).unwrap();
    g.ingest_triples(
        &[
            tt("disease_0", "treated_by", "treatment_0"),
            tt("disease_1", "has_symptom", "symptom_0"),
            tt("disease_1", "has_symptom", "symptom_1"),
            tt("disease_2", "has_symptom", "symptom_2"),
        ],
        0,
    )
    .unwrap();
    let id = |n: &str| g.resolve(n).unwrap();
    check(
        "deficit_peers",
        deficit(&g, id("disease_0"), "has_symptom").unwrap() == 1.0,
    );
    check(
        "deficit_present",
        deficit(&g, id("disease_1"), "has_symptom").unwrap() == 0.0,
    );
    check(
        "deficit_alone",
        deficit(&g, id("treatment_0"), "has_symptom").unwrap() == 0.0,
    );

    check("degree_half", (degree_score(2, 4) - 0.5).abs() < 1e-6);
    check("degree_zero", (degree_score(0, 4) - 1.0).abs() < 1e-9);
    check(
        "composite_t0",
        (composite(alpha_at(0, 100, 0.5), 0.8, 0.5, 0.6) - 0.7).abs() < 1e-12,
    );
    check(
        "composite_tb",
        (composite(alpha_at(100, 100, 0.5), 0.8, 0.5, 0.6) - 1.1).abs() < 1e-12,
    );

    let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let fused = rrf_scores(&[ids(&["A", "B", "C"]), ids(&["C", "A", "B"])], 60.0);
    let order: Vec<&str> = fused.iter().map(|(i, _)| i.as_str()).collect();
    check("rrf_order", order == ["A", "C", "B"]);
    check(
        "rrf_values",
        fused
            .iter()
            .zip([0.032522, 0.032266, 0.032002])
            .all(|((_, s), w)| (s - w).abs() < 1e-6),
    );

    let ds: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let gate = nearest_rank_percentile(&ds, 0.9).unwrap();
    check("percentile_gate", (gate - 0.9).abs() < 1e-12 && 0.5 < gate);
    let s = Scheduler::new(SchedulerConfig::default());
    check("gate_all_zero", {
        let mut z = KnowledgeGraph::new(Schema::medical(), EmbedderSpec::default()).unwrap();
        z.ingest_triples(&[tt("disease_0", "has_symptom", "symptom_0")], 0)
            .unwrap();
        s.select_relation(&z, z.resolve("disease_0").unwrap())
            .unwrap()
            .is_none()
    });

    check("rouge_l", (rouge_l("the cat sat", "the cat ran") - 0.6667).abs() < 1e-4);
    outcome(
        fails.is_empty(),
        if fails.is_empty() {
            "all worked examples hold".into()
        } else {
            format!("failed: {}", fails.join(", "))
        },
    )
}

fn criterion_3(docs: &[SyntheticDoc]) -> Outcome {
    let cfg = CrawlConfig {
        budget: BUDGET,
        k: 5,
        seed: 1,
        ..Default::default()
    };
    let mut v = victim(&cfg, docs);
    let mut policy = RagCrawler::new(&cfg).unwrap().with_audit();
    let trace = run_crawl(&mut v, &mut policy, &RuleExtractor, &cfg).unwrap();
    let c = trace.cache.unwrap();
    let ratio = c.recomputations as f64 / c.uncached_equivalent as f64;
    outcome(
        c.audit_mismatches == 0 && ratio < 0.6,
        format!(
            "{} rounds, {} mismatches, recomputations {}/{} = {:.3} (< 0.600)",
            trace.rounds.len(),
            c.audit_mismatches,
            c.recomputations,
            c.uncached_equivalent,
            ratio
        ),
    )
}

fn criterion_4() -> Outcome {
    let cfg = CrawlConfig {
        budget: 80,
        k: 5,
        seed: 7,
        ..Default::default()
    };
    let s = &cfg.schema;
    let gt = generate_ground_truth(21, 80, &s.entity_types, &s.relation_types, 3).unwrap();
    let docs = render_corpus(&gt, 3).unwrap();
    let facts_of: BTreeMap<&str, BTreeSet<(String, String, String)>> = docs
        .iter()
        .map(|d| (d.id.as_str(), d.facts.iter().cloned().collect()))
        .collect();
    let trace = crawl(&cfg, &docs, "ragcrawler");
    let mut bad_rounds = 0;
    let mut covered = BTreeSet::new();
    for r in &trace.rounds {
        let got: BTreeSet<_> = r
            .triples
            .iter()
            .map(|[h, rel, t]| (h.clone(), rel.clone(), t.clone()))
            .collect();
        let want: BTreeSet<_> = if r.refused {
            BTreeSet::new()
        } else {
            covered.extend(r.retrieved.iter().map(String::as_str));
            r.retrieved
                .iter()
                .flat_map(|id| facts_of[id.as_str()].iter().cloned())
                .collect()
        };
        bad_rounds += usize::from(got != want);
    }
    let names: BTreeMap<u32, &str> = trace.kg.entities.iter().map(|e| (e.id, e.name.as_str())).collect();
    let kg: BTreeSet<_> = trace
        .kg
        .edges
        .iter()
        .map(|e| {
            (
                names[&e.head].to_string(),
                e.relation.clone(),
                names[&e.tail].to_string(),
            )
        })
        .collect();
    let restricted: BTreeSet<_> = covered.iter().flat_map(|id| facts_of[id].iter().cloned()).collect();
    outcome(
        bad_rounds == 0 && kg == restricted,
        format!(
            "{} rounds, {bad_rounds} mismatched rounds, final KG {} facts vs {} covered ground-truth facts",
            trace.rounds.len(),
            kg.len(),
            restricted.len()
        ),
    )
}

fn criterion_5(attack: f64, baselines: &[(&str, f64)]) -> Outcome {
    let mut ok = true;
    let mut parts = vec![format!("attack {attack:.4}")];
    for (name, cov) in baselines {
        let min_gap = MIN_GAP.iter().find(|(n, _)| n == name).unwrap().1;
        let gap = attack - cov;
        ok &= gap > 0.0 && gap >= min_gap;
        parts.push(format!("{name} {cov:.4} (gap {gap:.4}, min {min_gap:.4})"));
    }
    outcome(ok, parts.join(", "))
}

fn criterion_6(docs: &[SyntheticDoc]) -> Outcome {
    let base = CrawlConfig {
        budget: BUDGET,
        k: 5,
        seed: 1,
        ..Default::default()
    };
    let mut parts = Vec::new();
    let mut ok = true;
    for mode in [VictimMode::Rewrite, VictimMode::MultiQuery] {
        let mut cfg = base.clone();
        cfg.victim.mode = mode;
        let t = crawl(&cfg, docs, "ragcrawler");
        ok &= t.is_monotone();
        parts.push(format!("{mode:?} coverage {:.3}", t.final_coverage()));
    }
    let mut single = base.clone();
    single.victim.mode = VictimMode::MultiQuery;
    single.victim.n_subqueries = 1;
    let same = crawl(&single, docs, "ragcrawler") == crawl(&base, docs, "ragcrawler");
    ok &= same;
    parts.push(format!("single-subquery trace identical to vanilla: {same}"));
    outcome(ok, parts.join(", "))
}

fn criterion_7(by_k: &[(usize, f64)]) -> Outcome {
    let ok = by_k.windows(2).all(|w| w[0].1 <= w[1].1);
    let parts: Vec<String> = by_k.iter().map(|(k, c)| format!("k={k}: {c:.4}")).collect();
    outcome(ok, parts.join(", "))
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    std::fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn criterion_8() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_ragcrawl");
    let tmp = tempfile::tempdir().unwrap();
    let run_all = |name: &str| -> (BTreeMap<String, Vec<u8>>, Vec<u8>, bool) {
        let out = tmp.path().join(name);
        let out_s = out.to_str().unwrap();
        let corpus = out.join("corpus.jsonl");
        let corpus_s = corpus.to_str().unwrap();
        let small = ["--set", "budget=40", "--set", "k=5"];
        let invocations: Vec<Vec<&str>> = vec![
            vec!["--mode", "gen-corpus", "--seed", "3", "--set", "corpus.n_entities=60"],
            [&["--mode", "attack", "--seed", "1,2", "--corpus", corpus_s][..], &small].concat(),
            [&["--mode", "eval", "--seed", "1,2", "--corpus", corpus_s][..], &small].concat(),
        ];
        let mut ok = true;
        for args in invocations {
            let st = Command::new(bin).args(&args).args(["--out", out_s]).status().unwrap();
            ok &= st.success();
        }
        let base_out = out.join("baseline");
        let st = Command::new(bin)
            .args([
                "--mode",
                "baseline",
                "--baseline",
                "keyword",
                "--seed",
                "1",
                "--corpus",
                corpus_s,
            ])
            .args(small)
            .args(["--out", base_out.to_str().unwrap()])
            .status()
            .unwrap();
        ok &= st.success();
        let theory = Command::new(bin).args(["--mode", "theory-check"]).output().unwrap();
        ok &= theory.status.success();
        (tree(&out), theory.stdout, ok)
    };
    let (a, ta, oka) = run_all("a");
    let (b, tb, okb) = run_all("b");
    let same = a == b && ta == tb;
    outcome(
        oka && okb && same && a.len() > 10,
        format!(
            "{} output files per run, byte-identical: {same}, all exit 0: {}",
            a.len(),
            oka && okb
        ),
    )
}

fn main() {
    let docs = benchmark_corpus();
    let mut results: Vec<(usize, Outcome)> = vec![
        (1, criterion_1()),
        (2, criterion_2()),
        (3, criterion_3(&docs)),
        (4, criterion_4()),
    ];

    let start = Instant::now();
    let attack = mean_coverage(&docs, "ragcrawler", 5);
    let baselines: Vec<(&str, f64)> = ["random", "keyword", "continuation"]
        .iter()
        .map(|b| (*b, mean_coverage(&docs, b, 5)))
        .collect();
    let mut c5 = criterion_5(attack, &baselines);
    let elapsed = start.elapsed();
    c5.passed &= elapsed < Duration::from_secs(300);
    c5.detail.push_str(&format!(" in {:.1}s", elapsed.as_secs_f64()));
    results.push((5, c5));
    results.push((6, criterion_6(&docs)));

    let by_k: Vec<(usize, f64)> = std::iter::once((5, attack))
        .chain([10, 20].iter().map(|&k| (k, mean_coverage(&docs, "ragcrawler", k))))
        .collect();
    results.push((7, criterion_7(&by_k)));
    results.push((8, criterion_8()));

    let mut failed = 0;
    for (n, o) in &results {
        println!("{} criterion {n}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
