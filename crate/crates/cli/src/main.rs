use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use ragcrawl::config::CrawlConfig;
use ragcrawl::corpusgen::{
    generate_ground_truth, read_corpus_jsonl, render_corpus, render_corpus_noisy, write_corpus_jsonl, SyntheticDoc,
};
use ragcrawl::crawl::{build_policy, run_crawl, CrawlTrace, RoundRecord};
use ragcrawl::embed::Embedder;
use ragcrawl::extract::build_extractor;
use ragcrawl::kg::KgSnapshot;
use ragcrawl::metrics::{
    coverage_rate, eval_queries, reconstruction_fidelity, semantic_fidelity, EvalReport, Reconstruction,
};
use ragcrawl::qgen::write_query_log;
use ragcrawl::theory::run_theory_suite;
use ragcrawl::victim::{Victim, VictimMode};
use ragcrawl::Error;

const EVAL_QUERIES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Attack,
    Baseline,
    Eval,
    GenCorpus,
    TheoryCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VictimModeArg {
    Vanilla,
    Rewrite,
    #[value(name = "multi_query", alias = "multi-query")]
    MultiQuery,
}

#[derive(Debug, Parser)]
#[command(
    name = "ragcrawl",
    version,
    about = "Knowledge-graph-guided crawling of simulated RAG services"
)]
struct Cli {
    #[arg(long, value_enum)]
    mode: Mode,
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus JSONL; generated from the `[corpus]` section when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seed: Vec<u64>,
    #[arg(long, value_enum)]
    victim_mode: Option<VictimModeArg>,
    /// random, keyword or continuation.
    #[arg(long, default_value = "random")]
    baseline: String,
    /// Config override, `key=value` with a dotted key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

enum Failure {
    Config(String),
    Runtime(String),
    Theory(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) => 3,
            Failure::Theory(_) => 4,
        }
    }

    fn record(&self) -> serde_json::Value {
        let (kind, msg) = match self {
            Failure::Config(m) => ("config", m),
            Failure::Runtime(m) => ("runtime", m),
            Failure::Theory(m) => ("theory_check", m),
        };
        serde_json::json!({ "error": kind, "message": msg, "exit_code": self.code() })
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownStrategy(_) | Error::TomlDe(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(cli: &Cli) -> Result<CrawlConfig, Failure> {
    let mut cfg = CrawlConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(m) = cli.victim_mode {
        cfg.victim.mode = match m {
            VictimModeArg::Vanilla => VictimMode::Vanilla,
            VictimModeArg::Rewrite => VictimMode::Rewrite,
            VictimModeArg::MultiQuery => VictimMode::MultiQuery,
        };
    }
    cfg.validate()?;
    if cli.seed.is_empty() {
        return Err(Failure::Config("at least one seed is required".into()));
    }
    Ok(cfg)
}

fn generate_corpus(cfg: &CrawlConfig, seed: u64) -> Result<Vec<SyntheticDoc>, Failure> {
    let c = &cfg.corpus;
    let gt = generate_ground_truth(
        seed,
        c.n_entities,
        &cfg.schema.entity_types,
        &cfg.schema.relation_types,
        c.triples_per_entity,
    )?;
    let docs = if c.p_alias > 0.0 {
        render_corpus_noisy(&gt, c.facts_per_doc, c.p_alias)?
    } else {
        render_corpus(&gt, c.facts_per_doc)?
    };
    Ok(docs)
}

fn load_corpus(cli: &Cli, cfg: &CrawlConfig) -> Result<Vec<SyntheticDoc>, Failure> {
    match &cli.corpus {
        Some(p) => Ok(read_corpus_jsonl(p)?),
        None => generate_corpus(cfg, cfg.corpus.seed),
    }
}

fn victim_for(cfg: &CrawlConfig, docs: &[SyntheticDoc]) -> Result<Victim, Failure> {
    let embedder = Embedder::new(cfg.embedder.clone())?;
    Ok(Victim::from_synthetic(docs, embedder, cfg.victim_config())?)
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn crawl_seed(cfg: &CrawlConfig, docs: &[SyntheticDoc], policy_name: &str, out: &Path) -> Result<CrawlTrace, Failure> {
    let mut victim = victim_for(cfg, docs)?;
    let extractor = build_extractor(&cfg.extractor)?;
    let mut policy = build_policy(policy_name, cfg)?;
    let trace = run_crawl(&mut victim, policy.as_mut(), extractor.as_ref(), cfg)?;
    let dir = seed_dir(out, cfg.seed);
    std::fs::create_dir_all(&dir)?;
    trace.write_trace_jsonl(&dir.join("trace.jsonl"))?;
    trace.write_coverage_csv(&dir.join("coverage.csv"))?;
    trace.write_kg_json(&dir.join("kg.json"))?;
    trace.write_scheduler_csv(&dir.join("scheduler.csv"))?;
    write_query_log(&trace.query_log(), &dir.join("queries.jsonl"))?;
    victim.oracle().write_jsonl(&dir.join("oracle.jsonl"))?;
    Ok(trace)
}

fn run_crawls(cli: &Cli, cfg: &CrawlConfig, policy_name: &str) -> Result<(), Failure> {
    let docs = load_corpus(cli, cfg)?;
    std::fs::create_dir_all(&cli.out)?;
    let results: Vec<Result<CrawlTrace, Failure>> = std::thread::scope(|s| {
        let handles: Vec<_> = cli
            .seed
            .iter()
            .map(|&seed| {
                let cfg = CrawlConfig { seed, ..cfg.clone() };
                let docs = &docs;
                let out = &cli.out;
                s.spawn(move || crawl_seed(&cfg, docs, policy_name, out))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Failure::Runtime("crawl worker panicked".into())))
            })
            .collect()
    });
    let mut summary = String::from("seed,policy,rounds,converged,coverage\n");
    let mut total = 0.0;
    for r in results {
        let t = r?;
        total += t.final_coverage();
        writeln!(
            summary,
            "{},{},{},{},{:.6}",
            t.seed,
            t.policy,
            t.rounds.len(),
            t.converged,
            t.final_coverage()
        )
        .expect("string write");
    }
    writeln!(summary, "mean,{policy_name},,,{:.6}", total / cli.seed.len() as f64).expect("string write");
    std::fs::write(cli.out.join("summary.csv"), summary)?;
    Ok(())
}

fn read_trace(dir: &Path) -> Result<Vec<RoundRecord>, Failure> {
    let file = std::fs::File::open(dir.join("trace.jsonl"))
        .map_err(|e| Failure::Runtime(format!("{}: {e}", dir.join("trace.jsonl").display())))?;
    let mut rounds = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            rounds.push(serde_json::from_str(&line).map_err(|e| Failure::Runtime(e.to_string()))?);
        }
    }
    Ok(rounds)
}

fn evaluate_seed(cli: &Cli, cfg: &CrawlConfig, docs: &[SyntheticDoc], seed: u64) -> Result<EvalReport, Failure> {
    let dir = seed_dir(&cli.out, seed);
    let kg: KgSnapshot = serde_json::from_str(&std::fs::read_to_string(dir.join("kg.json"))?)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let trace = CrawlTrace {
        policy: String::new(),
        seed,
        corpus_size: docs.len(),
        rounds: read_trace(&dir)?,
        converged: false,
        kg,
        scheduler: Vec::new(),
        cache: None,
    };
    let cfg = CrawlConfig { seed, ..cfg.clone() };
    let embedder = Embedder::new(cfg.embedder.clone())?;
    let texts: Vec<String> = docs.iter().map(|d| d.text.clone()).collect();
    let snippets = trace.snippets();
    let reconstruction = if snippets.is_empty() {
        None
    } else {
        let mut victim = victim_for(&cfg, docs)?;
        Some(reconstruction_fidelity(
            &snippets,
            &mut victim,
            &cfg.victim_config(),
            &embedder,
            &eval_queries(docs, EVAL_QUERIES),
        )?)
    };
    let report = EvalReport {
        coverage_rate: coverage_rate(&trace, docs.len()),
        semantic_fidelity: semantic_fidelity(&texts, &snippets, &embedder)?,
        reconstruction,
    };
    report.write_json(&dir.join("report.json"))?;
    Ok(report)
}

fn run_eval(cli: &Cli, cfg: &CrawlConfig) -> Result<(), Failure> {
    let docs = load_corpus(cli, cfg)?;
    let reports = cli
        .seed
        .iter()
        .map(|&s| evaluate_seed(cli, cfg, &docs, s))
        .collect::<Result<Vec<_>, _>>()?;
    let n = reports.len() as f64;
    let recs: Vec<Reconstruction> = reports.iter().filter_map(|r| r.reconstruction).collect();
    let reconstruction = (!recs.is_empty()).then(|| {
        let m = recs.len() as f64;
        Reconstruction {
            success_rate: recs.iter().map(|r| r.success_rate).sum::<f64>() / m,
            similarity: recs.iter().map(|r| r.similarity).sum::<f64>() / m,
            rouge_l: recs.iter().map(|r| r.rouge_l).sum::<f64>() / m,
            comparable_pairs: recs.iter().map(|r| r.comparable_pairs).sum(),
        }
    });
    let mean = EvalReport {
        coverage_rate: reports.iter().map(|r| r.coverage_rate).sum::<f64>() / n,
        semantic_fidelity: reports.iter().map(|r| r.semantic_fidelity).sum::<f64>() / n,
        reconstruction,
    };
    std::fs::create_dir_all(&cli.out)?;
    mean.write_json(&cli.out.join("report.json"))?;
    Ok(())
}

fn run_gen_corpus(cli: &Cli, cfg: &CrawlConfig) -> Result<(), Failure> {
    let docs = generate_corpus(cfg, cli.seed[0])?;
    std::fs::create_dir_all(&cli.out)?;
    write_corpus_jsonl(&docs, &cli.out.join("corpus.jsonl"))?;
    Ok(())
}

fn run_theory() -> Result<(), Failure> {
    let checks = run_theory_suite()?;
    let mut failed = BTreeSet::new();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        if !c.passed {
            failed.insert(c.name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Theory(format!(
            "failed checks: {}",
            failed.into_iter().collect::<Vec<_>>().join(", ")
        )))
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    match cli.mode {
        Mode::Attack => run_crawls(cli, &cfg, "ragcrawler"),
        Mode::Baseline => {
            if cli.baseline == "ragcrawler" {
                return Err(Failure::Config("--baseline must name a baseline policy".into()));
            }
            run_crawls(cli, &cfg, &cli.baseline)
        }
        Mode::Eval => run_eval(cli, &cfg),
        Mode::GenCorpus => run_gen_corpus(cli, &cfg),
        Mode::TheoryCheck => run_theory(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.record());
            ExitCode::from(f.code())
        }
    }
}
