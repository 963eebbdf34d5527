//! Attacker-side knowledge graph: typed entities with alias sets, labeled
//! directed edges with round provenance, incremental ingestion and
//! embedding-based consolidation of entities and relation labels.
//!
//! Every structural mutation bumps version counters (per entity, per entity
//! type, and a global merge epoch). The scheduler's score cache keys its
//! entries on these counters.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, embed_text, EmbedderSpec, EmbeddingVector};
use crate::error::{Error, Result};

pub type EntityId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub entity_types: Vec<String>,
    pub relation_types: Vec<String>,
    pub topic: String,
}

impl Schema {
    pub fn new(entity_types: Vec<String>, relation_types: Vec<String>, topic: impl Into<String>) -> Result<Self> {
        let s = Self {
            entity_types,
            relation_types,
            topic: topic.into(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (what, list) in [("entity", &self.entity_types), ("relation", &self.relation_types)] {
            if list.is_empty() {
                return Err(Error::Config(format!("schema has no {what} types")));
            }
            let uniq: BTreeSet<&String> = list.iter().collect();
            if uniq.len() != list.len() {
                return Err(Error::Config(format!("schema has duplicate {what} types")));
            }
        }
        Ok(())
    }

    /// The medical schema used by the bundled synthetic corpora.
    pub fn medical() -> Self {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            entity_types: v(&["disease", "symptom", "treatment"]),
            relation_types: v(&[
                "has_symptom",
                "treated_by",
                "caused_by",
                "associated_with",
                "risk_factor_for",
                "diagnosed_by",
            ]),
            topic: "medical records".into(),
        }
    }

    pub fn has_type(&self, t: &str) -> bool {
        self.entity_types.iter().any(|x| x == t)
    }
}

/// A candidate fact before identity resolution.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TypedTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub head_type: String,
    pub tail_type: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entity {
    pub id: EntityId,
    pub canonical_name: String,
    pub entity_type: String,
    pub aliases: BTreeSet<String>,
    pub embedding: EmbeddingVector,
    pub first_seen_round: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub head: EntityId,
    pub relation: String,
    pub tail: EntityId,
    pub provenance_rounds: BTreeSet<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IngestOutcome {
    pub new_entities: usize,
    pub new_edges: usize,
    pub rejected: usize,
    pub touched: BTreeSet<EntityId>,
}

type EdgeKey = (EntityId, String, EntityId);

/// Surface forms are compared case-folded with a trailing plural `s` removed.
fn normalize_surface(name: &str) -> String {
    let lower = name.trim().to_lowercase();
    if lower.len() > 2 && lower.ends_with('s') && !lower.ends_with("ss") {
        lower[..lower.len() - 1].to_string()
    } else {
        lower
    }
}

/// Text embedded for a name: the normalized surface with `_` as a word break,
/// so `disease_2` and `disease_20` share only their type word.
fn embedding_key(name: &str) -> String {
    normalize_surface(name).replace('_', " ")
}

#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    schema: Schema,
    embed_spec: EmbedderSpec,
    entities: BTreeMap<EntityId, Entity>,
    alias_index: HashMap<String, EntityId>,
    edges: BTreeMap<EdgeKey, BTreeSet<usize>>,
    incident: BTreeMap<EntityId, BTreeMap<String, usize>>,
    type_relation_totals: BTreeMap<(String, String), usize>,
    relation_alias: BTreeMap<String, String>,
    relation_embeddings: BTreeMap<String, EmbeddingVector>,
    next_id: EntityId,
    entity_versions: BTreeMap<EntityId, u64>,
    type_versions: BTreeMap<String, u64>,
    merge_epoch: u64,
}

impl KnowledgeGraph {
    pub fn new(schema: Schema, embed_spec: EmbedderSpec) -> Result<Self> {
        schema.validate()?;
        let mut relation_embeddings = BTreeMap::new();
        for r in &schema.relation_types {
            relation_embeddings.insert(r.clone(), embed_text(&embedding_key(r), &embed_spec)?);
        }
        Ok(Self {
            relation_alias: schema.relation_types.iter().map(|r| (r.clone(), r.clone())).collect(),
            type_versions: schema.entity_types.iter().map(|t| (t.clone(), 0)).collect(),
            schema,
            embed_spec,
            entities: BTreeMap::new(),
            alias_index: HashMap::new(),
            edges: BTreeMap::new(),
            incident: BTreeMap::new(),
            type_relation_totals: BTreeMap::new(),
            relation_embeddings,
            next_id: 0,
            entity_versions: BTreeMap::new(),
            merge_epoch: 0,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn edge_count_total(&self) -> usize {
        self.edges.len()
    }

    pub fn entity(&self, id: EntityId) -> Option<&Entity> {
        self.entities.get(&id)
    }

    pub fn entities(&self) -> impl Iterator<Item = &Entity> {
        self.entities.values()
    }

    pub fn entity_ids(&self) -> impl Iterator<Item = EntityId> + '_ {
        self.entities.keys().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|((h, r, t), rounds)| Edge {
            head: *h,
            relation: r.clone(),
            tail: *t,
            provenance_rounds: rounds.clone(),
        })
    }

    pub fn resolve(&self, surface: &str) -> Option<EntityId> {
        self.alias_index.get(&surface.trim().to_lowercase()).copied()
    }

    /// Canonical relation labels still active after relation merging, in schema order.
    pub fn relations(&self) -> Vec<String> {
        self.schema
            .relation_types
            .iter()
            .filter(|r| self.relation_alias.get(*r) == Some(*r))
            .cloned()
            .collect()
    }

    pub fn canonical_relation(&self, label: &str) -> Option<&str> {
        self.relation_alias.get(label).map(String::as_str)
    }

    fn require(&self, e: EntityId) -> Result<&Entity> {
        self.entities.get(&e).ok_or_else(|| Error::UnknownEntity(e.to_string()))
    }

    /// Incident edges regardless of direction.
    pub fn degree(&self, e: EntityId) -> Result<usize> {
        self.require(e)?;
        Ok(self.incident.get(&e).map(|m| m.values().sum()).unwrap_or(0))
    }

    pub fn edge_types(&self, e: EntityId) -> Result<BTreeSet<String>> {
        self.require(e)?;
        Ok(self
            .incident
            .get(&e)
            .map(|m| m.iter().filter(|(_, c)| **c > 0).map(|(r, _)| r.clone()).collect())
            .unwrap_or_default())
    }

    pub fn has_edge_type(&self, e: EntityId, r: &str) -> bool {
        self.incident.get(&e).and_then(|m| m.get(r)).is_some_and(|c| *c > 0)
    }

    /// All entities of `entity_type`, in id order.
    pub fn peers(&self, entity_type: &str) -> Vec<EntityId> {
        self.entities
            .values()
            .filter(|x| x.entity_type == entity_type)
            .map(|x| x.id)
            .collect()
    }

    pub fn edge_count(&self, e: EntityId, r: &str) -> Result<usize> {
        self.require(e)?;
        Ok(self.incident.get(&e).and_then(|m| m.get(r)).copied().unwrap_or(0))
    }

    pub fn max_degree(&self) -> usize {
        self.entities
            .keys()
            .map(|e| self.incident.get(e).map(|m| m.values().sum()).unwrap_or(0))
            .max()
            .unwrap_or(0)
    }

    /// Σ over entities of `entity_type` of incident `r`-edges, maintained incrementally.
    pub fn type_relation_total(&self, entity_type: &str, r: &str) -> usize {
        self.type_relation_totals
            .get(&(entity_type.to_string(), r.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn type_population(&self, entity_type: &str) -> usize {
        self.entities.values().filter(|x| x.entity_type == entity_type).count()
    }

    pub fn entity_version(&self, e: EntityId) -> u64 {
        self.entity_versions.get(&e).copied().unwrap_or(0)
    }

    pub fn type_version(&self, t: &str) -> u64 {
        self.type_versions.get(t).copied().unwrap_or(0)
    }

    pub fn merge_epoch(&self) -> u64 {
        self.merge_epoch
    }

    fn bump_entity(&mut self, e: EntityId) {
        *self.entity_versions.entry(e).or_insert(0) += 1;
        if let Some(t) = self.entities.get(&e).map(|x| x.entity_type.clone()) {
            *self.type_versions.entry(t).or_insert(0) += 1;
        }
    }

    fn get_or_create(
        &mut self,
        surface: &str,
        entity_type: &str,
        round: usize,
        out: &mut IngestOutcome,
    ) -> Result<EntityId> {
        let key = surface.trim().to_lowercase();
        if let Some(id) = self.alias_index.get(&key) {
            return Ok(*id);
        }
        let id = self.next_id;
        self.next_id += 1;
        let entity = Entity {
            id,
            canonical_name: surface.trim().to_string(),
            entity_type: entity_type.to_string(),
            aliases: BTreeSet::from([surface.trim().to_string()]),
            embedding: embed_text(&embedding_key(surface), &self.embed_spec)?,
            first_seen_round: round,
        };
        self.entities.insert(id, entity);
        self.alias_index.insert(key, id);
        self.bump_entity(id);
        out.new_entities += 1;
        out.touched.insert(id);
        Ok(id)
    }

    fn add_incident(&mut self, e: EntityId, r: &str) {
        *self.incident.entry(e).or_default().entry(r.to_string()).or_insert(0) += 1;
        let t = self.entities[&e].entity_type.clone();
        *self.type_relation_totals.entry((t, r.to_string())).or_insert(0) += 1;
        self.bump_entity(e);
    }

    /// Adds triples observed in `round`. Off-schema relations or types and
    /// self-loops are counted in `rejected` and skipped.
    pub fn ingest_triples(&mut self, triples: &[TypedTriple], round: usize) -> Result<IngestOutcome> {
        let mut out = IngestOutcome::default();
        for tr in triples {
            let Some(rel) = self.relation_alias.get(tr.relation.trim()).cloned() else {
                out.rejected += 1;
                continue;
            };
            if !self.schema.has_type(&tr.head_type) || !self.schema.has_type(&tr.tail_type) {
                out.rejected += 1;
                continue;
            }
            if tr.head.trim().is_empty()
                || tr.tail.trim().is_empty()
                || tr.head.trim().eq_ignore_ascii_case(tr.tail.trim())
            {
                out.rejected += 1;
                continue;
            }
            let h = self.get_or_create(&tr.head, &tr.head_type, round, &mut out)?;
            let t = self.get_or_create(&tr.tail, &tr.tail_type, round, &mut out)?;
            if h == t {
                out.rejected += 1;
                continue;
            }
            let key = (h, rel.clone(), t);
            match self.edges.get_mut(&key) {
                Some(rounds) => {
                    rounds.insert(round);
                }
                None => {
                    self.edges.insert(key, BTreeSet::from([round]));
                    self.add_incident(h, &rel);
                    self.add_incident(t, &rel);
                    out.new_edges += 1;
                    out.touched.insert(h);
                    out.touched.insert(t);
                }
            }
        }
        Ok(out)
    }

    fn rebuild_incident(&mut self) {
        self.incident.clear();
        self.type_relation_totals.clear();
        let keys: Vec<EdgeKey> = self.edges.keys().cloned().collect();
        for (h, r, t) in keys {
            let mut endpoints = vec![h];
            if t != h {
                endpoints.push(t);
            }
            for e in endpoints {
                *self.incident.entry(e).or_default().entry(r.clone()).or_insert(0) += 1;
                let ty = self.entities[&e].entity_type.clone();
                *self.type_relation_totals.entry((ty, r.clone())).or_insert(0) += 1;
            }
        }
        self.merge_epoch += 1;
        let ids: Vec<EntityId> = self.entities.keys().copied().collect();
        for id in ids {
            self.bump_entity(id);
        }
    }

    fn merge_entities(&mut self, keep: EntityId, gone: EntityId) {
        let removed = self.entities.remove(&gone).expect("merge target exists");
        self.entity_versions.remove(&gone);
        let kept = self.entities.get_mut(&keep).expect("merge keeper exists");
        kept.first_seen_round = kept.first_seen_round.min(removed.first_seen_round);
        for alias in &removed.aliases {
            kept.aliases.insert(alias.clone());
            self.alias_index.insert(alias.to_lowercase(), keep);
        }
        let old = std::mem::take(&mut self.edges);
        for ((h, r, t), rounds) in old {
            let h = if h == gone { keep } else { h };
            let t = if t == gone { keep } else { t };
            self.edges.entry((h, r, t)).or_default().extend(rounds);
        }
    }

    fn merge_relations(&mut self, keep: &str, gone: &str) {
        for target in self.relation_alias.values_mut() {
            if target == gone {
                *target = keep.to_string();
            }
        }
        let old = std::mem::take(&mut self.edges);
        for ((h, r, t), rounds) in old {
            let r = if r == gone { keep.to_string() } else { r };
            self.edges.entry((h, r, t)).or_default().extend(rounds);
        }
    }

    fn find_entity_pair(&self, threshold: f64, scope: Option<&BTreeSet<EntityId>>) -> Option<(EntityId, EntityId)> {
        let ids: Vec<&Entity> = self.entities.values().collect();
        for (i, a) in ids.iter().enumerate() {
            for b in &ids[i + 1..] {
                if a.entity_type != b.entity_type {
                    continue;
                }
                if let Some(scope) = scope {
                    if !scope.contains(&a.id) && !scope.contains(&b.id) {
                        continue;
                    }
                }
                if cosine(&a.embedding, &b.embedding).unwrap_or(0.0) >= threshold {
                    return Some((a.id, b.id));
                }
            }
        }
        None
    }

    fn find_relation_pair(&self, threshold: f64) -> Option<(String, String)> {
        let active = self.relations();
        for (i, a) in active.iter().enumerate() {
            for b in &active[i + 1..] {
                let sim = cosine(&self.relation_embeddings[a], &self.relation_embeddings[b]).unwrap_or(0.0);
                if sim >= threshold {
                    return Some((a.clone(), b.clone()));
                }
            }
        }
        None
    }

    fn merge_pass(&mut self, threshold: f64, scope: Option<BTreeSet<EntityId>>) -> usize {
        let mut merges = 0;
        let mut scope = scope;
        while let Some((keep, gone)) = self.find_entity_pair(threshold, scope.as_ref()) {
            // ids grow with discovery order, so the lower id is the earlier entity
            self.merge_entities(keep, gone);
            if let Some(s) = scope.as_mut() {
                s.remove(&gone);
                s.insert(keep);
            }
            merges += 1;
        }
        while let Some((keep, gone)) = self.find_relation_pair(threshold) {
            self.merge_relations(&keep, &gone);
            merges += 1;
        }
        if merges > 0 {
            self.rebuild_incident();
        }
        merges
    }

    /// Full consolidation to a fixpoint; returns the number of merges.
    pub fn semantic_merge(&mut self, threshold: f64) -> usize {
        self.merge_pass(threshold, None)
    }

    /// Consolidation restricted to pairs involving at least one of `touched`.
    pub fn semantic_merge_local(&mut self, threshold: f64, touched: &BTreeSet<EntityId>) -> usize {
        if touched.is_empty() {
            return 0;
        }
        self.merge_pass(threshold, Some(touched.clone()))
    }

    /// (head name, relation, tail name) for every edge, by canonical names.
    pub fn facts(&self) -> BTreeSet<(String, String, String)> {
        self.edges
            .keys()
            .map(|(h, r, t)| {
                (
                    self.entities[h].canonical_name.clone(),
                    r.clone(),
                    self.entities[t].canonical_name.clone(),
                )
            })
            .collect()
    }

    /// Fact lines grouped by head entity, one snippet per head with outgoing edges.
    pub fn snippets(&self) -> Vec<String> {
        let mut by_head: BTreeMap<EntityId, Vec<String>> = BTreeMap::new();
        for (h, r, t) in self.edges.keys() {
            by_head.entry(*h).or_default().push(format!(
                "{} | {} | {}",
                self.entities[h].canonical_name, r, self.entities[t].canonical_name
            ));
        }
        by_head.into_values().map(|lines| lines.join("\n")).collect()
    }

    pub fn to_snapshot(&self) -> KgSnapshot {
        KgSnapshot {
            schema: self.schema.clone(),
            entities: self
                .entities
                .values()
                .map(|e| EntityRecord {
                    id: e.id,
                    name: e.canonical_name.clone(),
                    entity_type: e.entity_type.clone(),
                    aliases: e.aliases.iter().cloned().collect(),
                    first_seen_round: e.first_seen_round,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .map(|((h, r, t), rounds)| EdgeRecord {
                    head: *h,
                    relation: r.clone(),
                    tail: *t,
                    rounds: rounds.iter().copied().collect(),
                })
                .collect(),
            relation_aliases: self
                .relation_alias
                .iter()
                .filter(|(k, v)| k != v)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &KgSnapshot, embed_spec: EmbedderSpec) -> Result<Self> {
        let mut g = Self::new(snap.schema.clone(), embed_spec)?;
        for (k, v) in &snap.relation_aliases {
            g.relation_alias.insert(k.clone(), v.clone());
        }
        for rec in &snap.entities {
            if !g.schema.has_type(&rec.entity_type) {
                return Err(Error::InvalidInput(format!(
                    "entity type {:?} not in schema",
                    rec.entity_type
                )));
            }
            let entity = Entity {
                id: rec.id,
                canonical_name: rec.name.clone(),
                entity_type: rec.entity_type.clone(),
                aliases: rec.aliases.iter().cloned().chain([rec.name.clone()]).collect(),
                embedding: embed_text(&embedding_key(&rec.name), &g.embed_spec)?,
                first_seen_round: rec.first_seen_round,
            };
            for a in &entity.aliases {
                g.alias_index.insert(a.to_lowercase(), rec.id);
            }
            g.entities.insert(rec.id, entity);
            g.next_id = g.next_id.max(rec.id + 1);
        }
        for e in &snap.edges {
            if !g.entities.contains_key(&e.head) || !g.entities.contains_key(&e.tail) {
                return Err(Error::InvalidInput("edge endpoint missing from entities".into()));
            }
            g.edges
                .insert((e.head, e.relation.clone(), e.tail), e.rounds.iter().copied().collect());
        }
        g.rebuild_incident();
        Ok(g)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&self.to_snapshot())?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn read_json(path: &Path, embed_spec: EmbedderSpec) -> Result<Self> {
        let snap: KgSnapshot = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_snapshot(&snap, embed_spec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub id: EntityId,
    pub name: String,
    #[serde(rename = "type")]
    pub entity_type: String,
    pub aliases: Vec<String>,
    pub first_seen_round: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub head: EntityId,
    pub relation: String,
    pub tail: EntityId,
    pub rounds: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgSnapshot {
    pub schema: Schema,
    pub entities: Vec<EntityRecord>,
    pub edges: Vec<EdgeRecord>,
    #[serde(default)]
    pub relation_aliases: BTreeMap<String, String>,
}
