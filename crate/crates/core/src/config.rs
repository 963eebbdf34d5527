//! Run configuration: TOML file plus dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::EmbedderSpec;
use crate::error::{Error, Result};
use crate::extract::ExtractorConfig;
use crate::kg::Schema;
use crate::qgen::RealizerConfig;
use crate::sched::SchedulerConfig;
use crate::victim::{default_refusal_patterns, VictimConfig, VictimMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VictimSection {
    pub p_leak: f64,
    pub mode: VictimMode,
    pub n_subqueries: usize,
    pub rrf_constant: f64,
    pub refusal_patterns: Vec<String>,
}

impl Default for VictimSection {
    fn default() -> Self {
        let v = VictimConfig::default();
        Self {
            p_leak: v.p_leak,
            mode: v.mode,
            n_subqueries: v.n_subqueries,
            rrf_constant: v.rrf_constant,
            refusal_patterns: default_refusal_patterns(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub seed: u64,
    pub n_entities: usize,
    pub triples_per_entity: usize,
    pub facts_per_doc: usize,
    /// Probability that a tail mention is rendered with a plural alias; 0 disables.
    pub p_alias: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 100,
            triples_per_entity: 4,
            facts_per_doc: 4,
            p_alias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrawlConfig {
    pub budget: usize,
    pub k: usize,
    pub c: f64,
    pub tau_merge: f64,
    pub tau_dup: f64,
    pub top_k: usize,
    pub max_trials: usize,
    pub window: usize,
    pub alpha0: f64,
    pub beta: f64,
    pub temperature: f64,
    pub relation_percentile: f64,
    pub seed: u64,
    pub topic: String,
    pub policy: String,
    pub schema: Schema,
    pub victim: VictimSection,
    pub embedder: EmbedderSpec,
    pub extractor: ExtractorConfig,
    pub realizer: RealizerConfig,
    pub corpus: CorpusSection,
}

impl Default for CrawlConfig {
    fn default() -> Self {
        let s = SchedulerConfig::default();
        let schema = Schema::medical();
        Self {
            budget: s.budget,
            k: 10,
            c: s.c,
            tau_merge: 0.9,
            tau_dup: 0.8,
            top_k: s.top_k,
            max_trials: 5,
            window: s.window,
            alpha0: s.alpha0,
            beta: s.beta,
            temperature: s.temperature,
            relation_percentile: s.relation_percentile,
            seed: 0,
            topic: schema.topic.clone(),
            policy: "ragcrawler".into(),
            schema,
            victim: VictimSection::default(),
            embedder: EmbedderSpec::default(),
            extractor: ExtractorConfig::default(),
            realizer: RealizerConfig::default(),
            corpus: CorpusSection::default(),
        }
    }
}

fn unit_interval(name: &str, x: f64) -> Result<()> {
    if x > 0.0 && x <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {x} outside (0, 1]")))
    }
}

impl CrawlConfig {
    // negated comparisons reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if !(self.c > 0.0) {
            return Err(Error::Config(format!("c = {} must be positive", self.c)));
        }
        unit_interval("tau_merge", self.tau_merge)?;
        unit_interval("tau_dup", self.tau_dup)?;
        unit_interval("alpha0", self.alpha0)?;
        unit_interval("relation_percentile", self.relation_percentile)?;
        if self.top_k == 0 || self.max_trials == 0 || self.window == 0 {
            return Err(Error::Config("top_k, max_trials and window must be positive".into()));
        }
        if !(self.temperature > 0.0) || !(self.beta > 0.0) {
            return Err(Error::Config("temperature and beta must be positive".into()));
        }
        if self.topic.trim().is_empty() {
            return Err(Error::Config("topic must be non-empty".into()));
        }
        self.schema.validate()?;
        self.victim_config().validate()
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig {
            c: self.c,
            budget: self.budget,
            alpha0: self.alpha0,
            beta: self.beta,
            top_k: self.top_k,
            temperature: self.temperature,
            window: self.window,
            relation_percentile: self.relation_percentile,
            seed: self.seed,
        }
    }

    pub fn victim_config(&self) -> VictimConfig {
        VictimConfig {
            k: self.k,
            p_leak: self.victim.p_leak,
            mode: self.victim.mode,
            n_subqueries: self.victim.n_subqueries,
            rrf_constant: self.victim.rrf_constant,
            refusal_patterns: self.victim.refusal_patterns.clone(),
            seed: self.seed,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_table(text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when absent) and applies `key=value` overrides,
    /// where `key` is a dotted path such as `victim.p_leak`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                .parse::<toml::Table>()
                .map_err(|e| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        for item in overrides {
            apply_override(&mut table, item)?;
        }
        Self::from_table(table)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in parents {
        let slot = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {key:?} crosses a non-table")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = CrawlConfig::default();
        c.validate().unwrap();
        assert_eq!((c.budget, c.k, c.top_k, c.max_trials, c.window), (1000, 10, 5, 5, 50));
        assert_eq!((c.c, c.tau_merge, c.tau_dup), (0.5, 0.9, 0.8));
    }

    #[test]
    fn toml_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "budget = 20\n[victim]\nmode = \"rewrite\"\n").unwrap();
        let c = CrawlConfig::load(
            Some(&p),
            &[
                "victim.p_leak=0.5".into(),
                "topic=cardiology notes".into(),
                "k = 3".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.budget, 20);
        assert_eq!(c.victim.mode, VictimMode::Rewrite);
        assert_eq!(c.victim.p_leak, 0.5);
        assert_eq!(c.topic, "cardiology notes");
        assert_eq!(c.victim_config().k, 3);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(
            CrawlConfig::load(None, &["budget=0".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            CrawlConfig::load(None, &["nonsense=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            CrawlConfig::load(None, &["tau_dup=1.5".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            CrawlConfig::load(None, &["budget".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            CrawlConfig::load(None, &["budget.x=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            CrawlConfig::from_toml_str("budget = ["),
            Err(Error::Config(_))
        ));
    }
}
