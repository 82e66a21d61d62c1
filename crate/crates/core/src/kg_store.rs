//! The meta-toxic knowledge graph: storage, persistence, merging, statistics.
//!
//! Edges are directed subject → object and unique per `(s, p, o)`. The
//! undirected incidence lists used for traversal are derived at
//! construction and sorted by (other endpoint, subject, predicate, object).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{Embedder, EmbeddingError};
use crate::kg_build::{apply_resolution, resolve_counts, BuildError, ElementKind, Triplet};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("graph file schema mismatch: expected version {expected}, found {found}")]
    SchemaVersionMismatch { expected: u32, found: String },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Build(#[from] BuildError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub count: u64,
    pub sources: BTreeSet<String>,
}

impl Edge {
    pub fn key(&self) -> (&str, &str, &str) {
        (&self.subject, &self.predicate, &self.object)
    }

    pub fn to_triplet(&self) -> Triplet {
        Triplet {
            subject: self.subject.clone(),
            predicate: self.predicate.clone(),
            object: self.object.clone(),
            count: self.count,
            sources: self.sources.clone(),
        }
    }

    /// The endpoint opposite `node`.
    pub fn other(&self, node: &str) -> &str {
        if self.subject == node {
            &self.object
        } else {
            &self.subject
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeGraph {
    nodes: BTreeSet<String>,
    edges: Vec<Edge>,
    incidence: BTreeMap<String, Vec<usize>>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges
    }
}

impl Eq for KnowledgeGraph {}

impl KnowledgeGraph {
    fn from_parts(nodes: BTreeSet<String>, mut edges: Vec<Edge>) -> Self {
        edges.sort();
        let mut incidence: BTreeMap<String, Vec<usize>> = nodes.iter().map(|n| (n.clone(), Vec::new())).collect();
        for (i, e) in edges.iter().enumerate() {
            incidence.get_mut(&e.subject).expect("endpoint is a node").push(i);
            if e.object != e.subject {
                incidence.get_mut(&e.object).expect("endpoint is a node").push(i);
            }
        }
        for (node, list) in incidence.iter_mut() {
            list.sort_by(|&a, &b| {
                let (ea, eb) = (&edges[a], &edges[b]);
                ea.other(node).cmp(eb.other(node)).then_with(|| ea.key().cmp(&eb.key()))
            });
        }
        Self { nodes, edges, incidence }
    }

    /// Folds duplicate `(s, p, o)` keys, summing counts and unioning sources.
    pub fn from_triplets(triplets: impl IntoIterator<Item = Triplet>) -> Self {
        let mut folded: BTreeMap<(String, String, String), (u64, BTreeSet<String>)> = BTreeMap::new();
        for t in triplets {
            let entry = folded.entry((t.subject, t.predicate, t.object)).or_default();
            entry.0 += t.count.max(1);
            entry.1.extend(t.sources);
        }
        let mut nodes = BTreeSet::new();
        let edges = folded
            .into_iter()
            .map(|((s, p, o), (count, sources))| {
                nodes.insert(s.clone());
                nodes.insert(o.clone());
                Edge { subject: s, predicate: p, object: o, count, sources }
            })
            .collect();
        Self::from_parts(nodes, edges)
    }

    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    /// Sorted by `(s, p, o)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn contains_node(&self, node: &str) -> bool {
        self.nodes.contains(node)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Edges touching `node` in either direction, in traversal order.
    pub fn incident(&self, node: &str) -> impl Iterator<Item = &Edge> + '_ {
        self.incidence.get(node).into_iter().flatten().map(move |&i| &self.edges[i])
    }

    pub fn triplets(&self) -> Vec<Triplet> {
        self.edges.iter().map(Edge::to_triplet).collect()
    }

    /// Node and edge-key sets agree, along with each edge's sources.
    /// Occurrence counts are not compared.
    pub fn isomorphic(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.edges.len() == other.edges.len()
            && self.edges.iter().zip(&other.edges).all(|(a, b)| a.key() == b.key() && a.sources == b.sources)
    }

    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            edges: self
                .edges
                .iter()
                .map(|e| EdgeRecord {
                    count: e.count,
                    o: e.object.clone(),
                    p: e.predicate.clone(),
                    s: e.subject.clone(),
                    sources: e.sources.iter().cloned().collect(),
                })
                .collect(),
            nodes: self.nodes.iter().cloned().collect(),
            schema_version: SCHEMA_VERSION,
        };
        serde_json::to_string_pretty(&file).expect("graph serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, StoreError> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| StoreError::SchemaVersionMismatch {
            expected: SCHEMA_VERSION,
            found: format!("unreadable document ({e})"),
        })?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(StoreError::SchemaVersionMismatch { expected: SCHEMA_VERSION, found: v.to_string() }),
            None => return Err(StoreError::SchemaVersionMismatch { expected: SCHEMA_VERSION, found: "none".into() }),
        }
        let file: GraphFile = serde_json::from_value(value).map_err(|e| StoreError::Invalid(e.to_string()))?;
        let nodes: BTreeSet<String> = file.nodes.into_iter().collect();
        let mut seen = BTreeSet::new();
        let mut edges = Vec::with_capacity(file.edges.len());
        for r in file.edges {
            if !nodes.contains(&r.s) || !nodes.contains(&r.o) {
                return Err(StoreError::Invalid(format!("edge ({}, {}, {}) has an endpoint outside the node set", r.s, r.p, r.o)));
            }
            if r.count == 0 {
                return Err(StoreError::Invalid(format!("edge ({}, {}, {}) has count 0", r.s, r.p, r.o)));
            }
            if !seen.insert((r.s.clone(), r.p.clone(), r.o.clone())) {
                return Err(StoreError::Invalid(format!("duplicate edge ({}, {}, {})", r.s, r.p, r.o)));
            }
            edges.push(Edge { subject: r.s, predicate: r.p, object: r.o, count: r.count, sources: r.sources.into_iter().collect() });
        }
        Ok(Self::from_parts(nodes, edges))
    }
}

// Fields are declared in alphabetical order so the file's keys are sorted.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    edges: Vec<EdgeRecord>,
    nodes: Vec<String>,
    schema_version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    count: u64,
    o: String,
    p: String,
    s: String,
    sources: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStats {
    pub entities_before: usize,
    pub entities_after: usize,
    pub triplets_before: usize,
    pub triplets_after: usize,
    pub entity_reduction_pct: f64,
    pub triplet_reduction_pct: f64,
}

fn reduction_pct(before: usize, after: usize) -> f64 {
    if before == 0 {
        0.0
    } else {
        100.0 * (before - after) as f64 / before as f64
    }
}

/// Unions two graphs and re-resolves entities and relations across them.
pub fn merge(
    g1: &KnowledgeGraph,
    g2: &KnowledgeGraph,
    embedder: &dyn Embedder,
    entity_threshold: f64,
    relation_threshold: f64,
) -> Result<(KnowledgeGraph, MergeStats), StoreError> {
    let triplets: Vec<Triplet> = g1.triplets().into_iter().chain(g2.triplets()).collect();
    let mut entity_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut relation_counts: BTreeMap<String, u64> = BTreeMap::new();
    for t in &triplets {
        *entity_counts.entry(t.subject.clone()).or_default() += t.count;
        *entity_counts.entry(t.object.clone()).or_default() += t.count;
        *relation_counts.entry(t.predicate.clone()).or_default() += t.count;
    }
    // isolated nodes carry no votes but still take part in clustering
    for n in g1.nodes().iter().chain(g2.nodes()) {
        entity_counts.entry(n.clone()).or_default();
    }
    let entity_map = resolve_counts(&entity_counts, ElementKind::Entity, embedder, entity_threshold)?;
    let relation_map = resolve_counts(&relation_counts, ElementKind::Relation, embedder, relation_threshold)?;
    let resolved = apply_resolution(triplets, &entity_map, &relation_map)?;

    let mut merged = KnowledgeGraph::from_triplets(resolved);
    let isolated: BTreeSet<String> = g1
        .nodes()
        .iter()
        .chain(g2.nodes())
        .filter_map(|n| entity_map.canonical(n).map(str::to_string))
        .filter(|n| !merged.nodes.contains(n))
        .collect();
    if !isolated.is_empty() {
        let mut nodes = merged.nodes.clone();
        nodes.extend(isolated);
        merged = KnowledgeGraph::from_parts(nodes, merged.edges.clone());
    }

    let stats = MergeStats {
        entities_before: g1.nodes().len() + g2.nodes().len(),
        entities_after: merged.nodes().len(),
        triplets_before: g1.edges().len() + g2.edges().len(),
        triplets_after: merged.edges().len(),
        entity_reduction_pct: reduction_pct(g1.nodes().len() + g2.nodes().len(), merged.nodes().len()),
        triplet_reduction_pct: reduction_pct(g1.edges().len() + g2.edges().len(), merged.edges().len()),
    };
    Ok((merged, stats))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub relation_vocabulary_size: usize,
    pub connected_component_count: usize,
}

/// Component count treats edges as undirected; isolated nodes count once each.
pub fn stats(g: &KnowledgeGraph) -> GraphStats {
    let index: BTreeMap<&str, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut parent: Vec<usize> = (0..index.len()).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut components = index.len();
    for e in &g.edges {
        let (a, b) = (find(&mut parent, index[e.subject.as_str()]), find(&mut parent, index[e.object.as_str()]));
        if a != b {
            parent[a] = b;
            components -= 1;
        }
    }
    GraphStats {
        node_count: g.nodes.len(),
        edge_count: g.edges.len(),
        relation_vocabulary_size: g.edges.iter().map(|e| e.predicate.as_str()).collect::<BTreeSet<_>>().len(),
        connected_component_count: components,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::TestEmbedder;

    fn t(s: &str, p: &str, o: &str, src: &str) -> Triplet {
        Triplet::new(s, p, o).with_source(src)
    }

    #[test]
    fn folds_duplicates() {
        let g = KnowledgeGraph::from_triplets(vec![t("A", "r", "B", "1"), t("A", "r", "B", "2"), t("B", "q", "C", "3")]);
        assert_eq!(g.nodes().len(), 3);
        assert_eq!(g.edges().len(), 2);
        let ab = g.edges().iter().find(|e| e.key() == ("A", "r", "B")).unwrap();
        assert_eq!(ab.count, 2);
        assert_eq!(ab.sources.len(), 2);
        assert!(KnowledgeGraph::from_triplets(vec![]).is_empty());
    }

    #[test]
    fn incidence_order_is_lexicographic() {
        let g = KnowledgeGraph::from_triplets(vec![t("A", "z", "C", "1"), t("B", "r", "A", "1"), t("A", "a", "C", "1")]);
        let order: Vec<_> = g.incident("A").map(|e| e.key()).collect();
        assert_eq!(order, vec![("B", "r", "A"), ("A", "a", "C"), ("A", "z", "C")]);
    }

    #[test]
    fn save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.json");
        for g in [
            KnowledgeGraph::default(),
            KnowledgeGraph::from_triplets(vec![t("A", "r", "B", "1"), t("B", "q", "C", "2"), t("C", "p", "A", "3")]),
        ] {
            g.save(&path).unwrap();
            let back = KnowledgeGraph::load(&path).unwrap();
            assert_eq!(back, g);
            assert_eq!(back.edges(), g.edges());
        }
    }

    #[test]
    fn file_keys_are_sorted() {
        let g = KnowledgeGraph::from_triplets(vec![t("A", "r", "B", "1")]);
        let json = g.to_json();
        let edges = json.find("\"edges\"").unwrap();
        let nodes = json.find("\"nodes\"").unwrap();
        let version = json.find("\"schema_version\"").unwrap();
        assert!(edges < nodes && nodes < version);
        let c = json.find("\"count\"").unwrap();
        assert!(c < json.find("\"o\"").unwrap() && json.find("\"s\"").unwrap() < json.find("\"sources\"").unwrap());
    }

    #[test]
    fn corrupted_file_is_schema_mismatch() {
        for text in ["{not json", r#"{"nodes": [], "edges": []}"#, r#"{"schema_version": 99, "nodes": [], "edges": []}"#] {
            assert!(matches!(KnowledgeGraph::from_json(text), Err(StoreError::SchemaVersionMismatch { .. })), "{text}");
        }
        let dangling = r#"{"schema_version": 1, "nodes": ["A"], "edges": [{"s": "A", "p": "r", "o": "B", "count": 1, "sources": []}]}"#;
        assert!(matches!(KnowledgeGraph::from_json(dangling), Err(StoreError::Invalid(_))));
    }

    #[test]
    fn stats_examples() {
        assert_eq!(
            stats(&KnowledgeGraph::default()),
            GraphStats { node_count: 0, edge_count: 0, relation_vocabulary_size: 0, connected_component_count: 0 }
        );
        let path = KnowledgeGraph::from_triplets(vec![t("A", "r", "B", "1"), t("B", "r", "C", "1")]);
        assert_eq!(
            stats(&path),
            GraphStats { node_count: 3, edge_count: 2, relation_vocabulary_size: 1, connected_component_count: 1 }
        );
    }

    #[test]
    fn self_merge_halves_triplets() {
        let g = KnowledgeGraph::from_triplets(vec![
            t("white lives matter", "is against", "black lives matter", "1"),
            t("immigrants", "are unwanted by", "locals", "2"),
        ]);
        let (m, s) = merge(&g, &g, &TestEmbedder::new(), 0.9, 0.9).unwrap();
        assert!(m.isomorphic(&g));
        assert_eq!(s.triplet_reduction_pct, 50.0);
        assert_eq!(s.entity_reduction_pct, 50.0);
        assert_eq!(m.edges()[0].count, 2);
    }

    #[test]
    fn disjoint_merge_has_no_reduction() {
        let g1 = KnowledgeGraph::from_triplets(vec![t("muslims", "are blamed for", "terrorism", "1")]);
        let g2 = KnowledgeGraph::from_triplets(vec![t("women", "belong in", "kitchen", "2")]);
        let (m, s) = merge(&g1, &g2, &TestEmbedder::new(), 0.9, 0.9).unwrap();
        assert_eq!(m.nodes().len(), 4);
        assert_eq!(s.entity_reduction_pct, 0.0);
        assert_eq!(s.triplet_reduction_pct, 0.0);
    }
}
