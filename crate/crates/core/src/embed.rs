//! Deterministic text embeddings and exact top-k cosine search.
//!
//! The default encoder is a seed-keyed feature hasher over case-folded word
//! unigrams and bigrams, L2-normalized. It needs no model weights and produces
//! bit-identical vectors across processes for a fixed [`EmbedderSpec`].

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Function words dropped before hashing so that similarity is carried by
/// content tokens. Applied only when at least one content token remains.
const STOPWORDS: &[&str] = &[
    "a", "about", "an", "and", "any", "are", "as", "at", "be", "by", "can", "could", "do", "does", "for", "from",
    "has", "have", "how", "i", "in", "is", "it", "its", "me", "more", "of", "on", "or", "please", "tell", "that",
    "the", "their", "there", "these", "this", "to", "was", "what", "which", "who", "with", "you", "your",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderSource {
    #[default]
    FeatureHash,
    FileLoaded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderSpec {
    pub dim: usize,
    pub seed: u64,
    pub ngram_range: (usize, usize),
    pub source: EmbedderSource,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        Self {
            dim: 256,
            seed: 0,
            ngram_range: (1, 2),
            source: EmbedderSource::FeatureHash,
        }
    }
}

/// Splits on Unicode whitespace, lowercases, and trims punctuation from token
/// edges. Tokens that are pure punctuation vanish.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|tok| tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
        .filter(|tok| !tok.is_empty())
        .collect()
}

fn content_tokens(text: &str) -> Vec<String> {
    let all = tokenize(text);
    let content: Vec<String> = all
        .iter()
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .cloned()
        .collect();
    if content.is_empty() {
        all
    } else {
        content
    }
}

fn seeded_hash(bytes: &[u8], seed: u64) -> u64 {
    let mut hash = FNV_OFFSET ^ seed.wrapping_mul(FNV_PRIME);
    for byte in bytes {
        hash ^= u64::from(*byte);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    // splitmix64 finalizer; FNV alone leaves the low bits poorly mixed
    hash ^= hash >> 30;
    hash = hash.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    hash ^= hash >> 27;
    hash = hash.wrapping_mul(0x94d0_49bb_1331_11eb);
    hash ^ (hash >> 31)
}

/// Feature-hashing embedding of `text` under `spec`, ignoring `spec.source`.
pub fn embed_text(text: &str, spec: &EmbedderSpec) -> Result<EmbeddingVector> {
    if text.trim().is_empty() {
        return Err(Error::EmptyText);
    }
    if spec.dim == 0 {
        return Err(Error::InvalidInput("embedding dim must be positive".into()));
    }
    let (lo, hi) = spec.ngram_range;
    if lo == 0 || hi < lo {
        return Err(Error::InvalidInput(format!("bad ngram range {lo}..={hi}")));
    }
    let tokens = content_tokens(text);
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    let mut values = vec![0.0f64; spec.dim];
    for n in lo..=hi {
        for gram in tokens.windows(n) {
            let feature = gram.join(" ");
            let h = seeded_hash(feature.as_bytes(), spec.seed);
            let bucket = (h % spec.dim as u64) as usize;
            let sign = if (h >> 32) & 1 == 0 { 1.0 } else { -1.0 };
            values[bucket] += sign;
        }
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        // every feature cancelled out; fall back to unsigned unigram counts
        for tok in &tokens {
            let h = seeded_hash(tok.as_bytes(), spec.seed);
            values[(h % spec.dim as u64) as usize] += 1.0;
        }
    }
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut values {
        *v /= norm;
    }
    Ok(EmbeddingVector { values })
}

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::DimensionMismatch {
            expected: u.dim(),
            found: v.dim(),
        });
    }
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

#[derive(Debug, Deserialize, Serialize)]
struct VectorRecord {
    id: String,
    vec: Vec<f64>,
}

fn read_vector_records(path: &Path, dim: usize) -> Result<Vec<(String, EmbeddingVector)>> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: VectorRecord = serde_json::from_str(&line)?;
        if rec.vec.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: rec.vec.len(),
            });
        }
        out.push((rec.id, EmbeddingVector::new(rec.vec)));
    }
    Ok(out)
}

/// Text encoder. Stateless in feature-hash mode; in file-loaded mode it looks
/// texts up (trimmed) in a table of externally computed vectors.
#[derive(Debug, Clone)]
pub struct Embedder {
    spec: EmbedderSpec,
    table: Option<HashMap<String, EmbeddingVector>>,
}

impl Embedder {
    pub fn new(spec: EmbedderSpec) -> Result<Self> {
        if spec.source == EmbedderSource::FileLoaded {
            return Err(Error::Config(
                "file_loaded embedder needs a vector file; use Embedder::from_jsonl".into(),
            ));
        }
        Ok(Self { spec, table: None })
    }

    pub fn hashing(dim: usize, seed: u64) -> Self {
        Self {
            spec: EmbedderSpec {
                dim,
                seed,
                ..EmbedderSpec::default()
            },
            table: None,
        }
    }

    /// Loads `{"id": .., "vec": [..]}` lines; every vector must have `spec.dim` entries.
    pub fn from_jsonl(spec: EmbedderSpec, path: &Path) -> Result<Self> {
        let records = read_vector_records(path, spec.dim)?;
        let spec = EmbedderSpec {
            source: EmbedderSource::FileLoaded,
            ..spec
        };
        Ok(Self {
            spec,
            table: Some(records.into_iter().collect()),
        })
    }

    pub fn spec(&self) -> &EmbedderSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        match &self.table {
            None => embed_text(text, &self.spec),
            Some(table) => {
                let key = text.trim();
                if key.is_empty() {
                    return Err(Error::EmptyText);
                }
                table
                    .get(key)
                    .cloned()
                    .ok_or_else(|| Error::MissingVector(key.to_string()))
            }
        }
    }
}

/// Exact cosine index; immutable once built.
#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    // sorted by id so equal scores resolve to the lower id
    entries: Vec<(String, EmbeddingVector)>,
}

impl VectorIndex {
    pub fn new(dim: usize, entries: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Result<Self> {
        let mut entries: Vec<(String, EmbeddingVector)> = entries.into_iter().collect();
        for (_, v) in &entries {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: v.dim(),
                });
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        entries.dedup_by(|a, b| a.0 == b.0);
        Ok(Self { dim, entries })
    }

    pub fn from_jsonl(path: &Path, dim: usize) -> Result<Self> {
        Self::new(dim, read_vector_records(path, dim)?)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.entries
            .binary_search_by(|(eid, _)| eid.as_str().cmp(id))
            .ok()
            .map(|i| &self.entries[i].1)
    }

    pub fn top_k(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<(String, f64)>> {
        if query.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: query.dim(),
            });
        }
        if self.entries.is_empty() {
            return Err(Error::InvalidInput("top_k on an empty index".into()));
        }
        let mut scored = Vec::with_capacity(self.entries.len());
        for (id, v) in &self.entries {
            scored.push((id.as_str(), cosine(query, v)?));
        }
        // stable sort keeps ascending-id order among equal scores
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal));
        Ok(scored.into_iter().take(k).map(|(id, s)| (id.to_string(), s)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(values: &[f64]) -> EmbeddingVector {
        let n = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        EmbeddingVector::new(values.iter().map(|v| v / n).collect())
    }

    #[test]
    fn embedding_is_deterministic_and_unit_norm() {
        let spec = EmbedderSpec::default();
        let a = embed_text("abc", &spec).unwrap();
        let b = embed_text("abc", &spec).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a.dim(), 256);
    }

    #[test]
    fn golden_kidney_disease() {
        let spec = EmbedderSpec {
            dim: 256,
            seed: 7,
            ..EmbedderSpec::default()
        };
        let v = embed_text("kidney disease", &spec).unwrap();
        let nonzero: Vec<(usize, f64)> = v
            .values()
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(i, x)| (i, *x))
            .collect();
        assert_eq!(nonzero, GOLDEN_KIDNEY_DISEASE.to_vec());
    }

    // frozen from the first run of the hasher
    const GOLDEN_KIDNEY_DISEASE: [(usize, f64); 3] = [
        (2, -0.5773502691896258),
        (13, 0.5773502691896258),
        (170, -0.5773502691896258),
    ];

    #[test]
    fn empty_text_rejected() {
        let spec = EmbedderSpec::default();
        assert!(matches!(embed_text("   ", &spec), Err(Error::EmptyText)));
        assert!(matches!(embed_text("", &spec), Err(Error::EmptyText)));
    }

    #[test]
    fn tokenizer_strips_edge_punctuation() {
        assert_eq!(
            tokenize("Hello, World! disease_2 | x"),
            vec!["hello", "world", "disease_2", "x"]
        );
    }

    #[test]
    fn cosine_examples() {
        let u = unit(&[1.0, 1.0]);
        let v = unit(&[1.0, 0.0]);
        assert!((cosine(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        assert!(cosine(&unit(&[1.0, 0.0]), &unit(&[0.0, 1.0])).unwrap().abs() < 1e-12);
        assert!((cosine(&u, &v).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_errors() {
        let u = unit(&[1.0, 0.0]);
        let w = unit(&[1.0, 0.0, 0.0]);
        assert!(matches!(cosine(&u, &w), Err(Error::DimensionMismatch { .. })));
        let z = EmbeddingVector::new(vec![0.0, 0.0]);
        assert!(matches!(cosine(&u, &z), Err(Error::ZeroVector)));
    }

    #[test]
    fn top_k_examples() {
        let idx = VectorIndex::new(
            3,
            vec![
                ("doc1".to_string(), unit(&[1.0, 0.0, 0.0])),
                ("doc2".to_string(), unit(&[0.0, 1.0, 0.0])),
                ("doc3".to_string(), unit(&[0.0, 0.0, 1.0])),
            ],
        )
        .unwrap();
        let q = unit(&[1.0, 0.0, 0.0]);
        assert_eq!(idx.top_k(&q, 1).unwrap(), vec![("doc1".to_string(), 1.0)]);
        assert_eq!(idx.top_k(&q, 10).unwrap().len(), 3);

        let tied = VectorIndex::new(
            2,
            vec![
                ("b".to_string(), unit(&[1.0, 1.0])),
                ("a".to_string(), unit(&[1.0, 1.0])),
            ],
        )
        .unwrap();
        assert_eq!(tied.top_k(&unit(&[1.0, 0.0]), 1).unwrap()[0].0, "a");
        assert!(matches!(
            tied.top_k(&unit(&[1.0, 0.0, 0.0]), 1),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn file_loaded_rejects_wrong_dim() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"vec\":[1.0,0.0]}\n{\"id\":\"b\",\"vec\":[1.0]}\n",
        )
        .unwrap();
        let spec = EmbedderSpec {
            dim: 2,
            ..EmbedderSpec::default()
        };
        assert!(matches!(
            Embedder::from_jsonl(spec.clone(), &path),
            Err(Error::DimensionMismatch { expected: 2, found: 1 })
        ));
        std::fs::write(&path, "{\"id\":\"a\",\"vec\":[1.0,0.0]}\n").unwrap();
        let e = Embedder::from_jsonl(spec, &path).unwrap();
        assert_eq!(e.embed(" a ").unwrap().values(), &[1.0, 0.0]);
        assert!(matches!(e.embed("zzz"), Err(Error::MissingVector(_))));
        assert_eq!(VectorIndex::from_jsonl(&path, 2).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric(a in "[a-z ]{1,30}[a-z]", b in "[a-z ]{1,30}[a-z]") {
            let spec = EmbedderSpec::default();
            let u = embed_text(&a, &spec).unwrap();
            let v = embed_text(&b, &spec).unwrap();
            prop_assert!((cosine(&u, &v).unwrap() - cosine(&v, &u).unwrap()).abs() < 1e-12);
            prop_assert!((u.norm() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn top_k_matches_brute_force(
            vecs in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..60),
            q in prop::collection::vec(-1.0f64..1.0, 4),
            k in 1usize..70,
        ) {
            prop_assume!(q.iter().any(|x| x.abs() > 1e-6));
            prop_assume!(vecs.iter().all(|v| v.iter().any(|x| x.abs() > 1e-6)));
            let entries: Vec<(String, EmbeddingVector)> = vecs
                .iter()
                .enumerate()
                .map(|(i, v)| (format!("d{i:03}"), EmbeddingVector::new(v.clone())))
                .collect();
            let idx = VectorIndex::new(4, entries.clone()).unwrap();
            let qv = EmbeddingVector::new(q);
            // oracle: score everything, sort by (score desc, id asc)
            let mut all: Vec<(String, f64)> = entries
                .iter()
                .map(|(id, v)| {
                    let dot: f64 = v.values().iter().zip(qv.values()).map(|(a, b)| a * b).sum();
                    (id.clone(), (dot / (v.norm() * qv.norm())).clamp(-1.0, 1.0))
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            all.truncate(k);
            let got = idx.top_k(&qv, k).unwrap();
            prop_assert_eq!(got.len(), all.len());
            for (g, o) in got.iter().zip(&all) {
                prop_assert!((g.1 - o.1).abs() < 1e-12);
            }
        }
    }
}
