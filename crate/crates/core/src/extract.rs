//! Answer-to-triple extraction in two passes: a strict extraction pass and a
//! reflection pass that only reports what the first pass missed.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{Schema, TypedTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    Extract,
    Reflect,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionResult {
    pub triples: Vec<TypedTriple>,
    pub pass: Pass,
    pub rejected: usize,
}

impl ExtractionResult {
    pub fn empty(pass: Pass) -> Self {
        Self {
            triples: Vec::new(),
            pass,
            rejected: 0,
        }
    }
}

fn triple_key(t: &TypedTriple) -> (String, String, String) {
    (t.head.to_lowercase(), t.relation.to_lowercase(), t.tail.to_lowercase())
}

pub trait Extractor: Send + Sync {
    fn name(&self) -> &str;

    fn extract_pass(&self, answer: &str, schema: &Schema) -> ExtractionResult;

    /// Must return only triples absent from `already`.
    fn reflect_pass(&self, answer: &str, schema: &Schema, already: &ExtractionResult) -> ExtractionResult;

    fn extract(&self, answer: &str, schema: &Schema) -> ExtractionResult {
        let first = self.extract_pass(answer, schema);
        let second = self.reflect_pass(answer, schema, &first);
        let mut seen = BTreeSet::new();
        let mut triples = Vec::with_capacity(first.triples.len() + second.triples.len());
        for t in first.triples.iter().chain(&second.triples) {
            if seen.insert(triple_key(t)) {
                triples.push(t.clone());
            }
        }
        ExtractionResult {
            triples,
            pass: Pass::Reflect,
            rejected: first.rejected + second.rejected,
        }
    }
}

/// Entity type from a `<type>_<index>` style name.
pub fn infer_type(name: &str) -> Option<String> {
    let (prefix, _) = name.trim().rsplit_once('_')?;
    if prefix.is_empty() {
        None
    } else {
        Some(prefix.to_lowercase())
    }
}

fn strict_grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(\S(?:[^|]*\S)?) \| (\S+) \| (\S(?:[^|]*\S)?)$").expect("valid regex"))
}

fn relaxed_grammar() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*([^|]*[^|\s])\s*\|\s*(\S+)\s*\|\s*([^|]*[^|\s])\s*$").expect("valid regex"))
}

fn typed(head: &str, relation: &str, tail: &str, schema: &Schema) -> Option<TypedTriple> {
    if !schema.relation_types.iter().any(|r| r == relation) {
        return None;
    }
    let head_type = infer_type(head).filter(|t| schema.has_type(t))?;
    let tail_type = infer_type(tail).filter(|t| schema.has_type(t))?;
    Some(TypedTriple {
        head: head.to_string(),
        relation: relation.to_string(),
        tail: tail.to_string(),
        head_type,
        tail_type,
    })
}

/// Parses canonical `head | relation | tail` lines; the reflection pass
/// accepts irregular spacing and letter case around the separators.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleExtractor;

impl Extractor for RuleExtractor {
    fn name(&self) -> &str {
        "rule"
    }

    fn extract_pass(&self, answer: &str, schema: &Schema) -> ExtractionResult {
        let mut out = ExtractionResult::empty(Pass::Extract);
        let mut seen = BTreeSet::new();
        for line in answer.lines() {
            let Some(c) = strict_grammar().captures(line) else {
                continue;
            };
            match typed(&c[1], &c[2], &c[3], schema) {
                Some(t) => {
                    if seen.insert(triple_key(&t)) {
                        out.triples.push(t);
                    }
                }
                None => out.rejected += 1,
            }
        }
        out
    }

    fn reflect_pass(&self, answer: &str, schema: &Schema, already: &ExtractionResult) -> ExtractionResult {
        let mut out = ExtractionResult::empty(Pass::Reflect);
        let mut seen: BTreeSet<_> = already.triples.iter().map(triple_key).collect();
        for line in answer.lines() {
            if strict_grammar().is_match(line) {
                continue;
            }
            let Some(c) = relaxed_grammar().captures(line) else {
                continue;
            };
            let (h, r, t) = (c[1].to_lowercase(), c[2].to_lowercase(), c[3].to_lowercase());
            match typed(&h, &r, &t, schema) {
                Some(tr) => {
                    if seen.insert(triple_key(&tr)) {
                        out.triples.push(tr);
                    }
                }
                None => out.rejected += 1,
            }
        }
        out
    }
}

#[derive(Debug, Serialize)]
struct ExtractRequest<'a> {
    task: &'a str,
    text: &'a str,
    schema: &'a Schema,
    known: Vec<[&'a str; 3]>,
}

#[derive(Debug, Deserialize)]
struct ExtractResponse {
    triples: Vec<Vec<String>>,
}

/// Delegates both passes to an external service speaking the
/// `{"task", "text", "schema", "known"}` -> `{"triples"}` JSON contract.
pub struct HttpExtractor {
    endpoint: String,
    retries: usize,
    agent: ureq::Agent,
}

impl HttpExtractor {
    pub fn new(endpoint: impl Into<String>, timeout: Duration, retries: usize) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            retries,
            agent,
        }
    }

    fn call(&self, req: &ExtractRequest<'_>) -> Result<ExtractResponse> {
        let mut last = None;
        for _ in 0..=self.retries {
            match self.agent.post(&self.endpoint).send_json(req) {
                Ok(mut resp) => {
                    return resp
                        .body_mut()
                        .read_json::<ExtractResponse>()
                        .map_err(|e| Error::Http(e.to_string()))
                }
                Err(e) => last = Some(e),
            }
        }
        Err(Error::Http(last.map(|e| e.to_string()).unwrap_or_default()))
    }

    fn run(&self, task: &str, pass: Pass, answer: &str, schema: &Schema, known: &[TypedTriple]) -> ExtractionResult {
        let req = ExtractRequest {
            task,
            text: answer,
            schema,
            known: known
                .iter()
                .map(|t| [t.head.as_str(), t.relation.as_str(), t.tail.as_str()])
                .collect(),
        };
        let resp = match self.call(&req) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("external extractor {task} failed: {e}");
                return ExtractionResult::empty(pass);
            }
        };
        let mut out = ExtractionResult::empty(pass);
        let mut seen: BTreeSet<_> = known.iter().map(triple_key).collect();
        for row in resp.triples {
            let tr = match row.as_slice() {
                [h, r, t, ht, tt] => Some(TypedTriple {
                    head: h.clone(),
                    relation: r.clone(),
                    tail: t.clone(),
                    head_type: ht.clone(),
                    tail_type: tt.clone(),
                }),
                [h, r, t] => typed(h, r, t, schema),
                _ => None,
            };
            match tr {
                Some(tr)
                    if schema.relation_types.contains(&tr.relation)
                        && schema.has_type(&tr.head_type)
                        && schema.has_type(&tr.tail_type) =>
                {
                    if seen.insert(triple_key(&tr)) {
                        out.triples.push(tr);
                    }
                }
                _ => out.rejected += 1,
            }
        }
        out
    }
}

impl Extractor for HttpExtractor {
    fn name(&self) -> &str {
        "http"
    }

    fn extract_pass(&self, answer: &str, schema: &Schema) -> ExtractionResult {
        self.run("extract", Pass::Extract, answer, schema, &[])
    }

    fn reflect_pass(&self, answer: &str, schema: &Schema, already: &ExtractionResult) -> ExtractionResult {
        self.run("reflect", Pass::Reflect, answer, schema, &already.triples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub kind: String,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub retries: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            kind: "rule".into(),
            endpoint: None,
            timeout_ms: 30_000,
            retries: 2,
        }
    }
}

pub fn build_extractor(cfg: &ExtractorConfig) -> Result<Box<dyn Extractor>> {
    match cfg.kind.as_str() {
        "rule" => Ok(Box::new(RuleExtractor)),
        "http" => {
            let endpoint = cfg
                .endpoint
                .clone()
                .ok_or_else(|| Error::Config("http extractor needs an endpoint".into()))?;
            Ok(Box::new(HttpExtractor::new(
                endpoint,
                Duration::from_millis(cfg.timeout_ms),
                cfg.retries,
            )))
        }
        other => Err(Error::UnknownStrategy(other.to_string())),
    }
}
