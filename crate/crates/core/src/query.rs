//! Graph query: entity extraction → node mapping → path retrieval →
//! formatting → ranking and filtering.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, Embedder, EmbeddingError, NearestNeighborIndex};
use crate::kg_build::meets_threshold;
use crate::kg_store::{Edge, KnowledgeGraph};
use crate::llm_gateway::{GatewayError, LlmGateway, PromptRole};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("node {0:?} is not in the graph")]
    NodeNotInGraph(String),
    #[error("invalid query config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    ShortestPath,
    OneHop,
}

impl std::str::FromStr for Strategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "shortest-path" => Ok(Strategy::ShortestPath),
            "one-hop" => Ok(Strategy::OneHop),
            other => Err(format!("unknown strategy {other:?} (expected shortest-path or one-hop)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QueryConfig {
    pub strategy: Strategy,
    /// When false, candidates are returned unranked and unfiltered.
    pub rank_filter: bool,
    pub mapping_floor: f64,
    pub rank_floor: f64,
    pub top_k: usize,
}

impl Default for QueryConfig {
    fn default() -> Self {
        Self { strategy: Strategy::ShortestPath, rank_filter: true, mapping_floor: 0.55, rank_floor: 0.35, top_k: 10 }
    }
}

impl QueryConfig {
    pub fn validate(&self) -> Result<(), QueryError> {
        for (name, v) in [("mapping_floor", self.mapping_floor), ("rank_floor", self.rank_floor)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(QueryError::Config(format!("{name} must be in (0, 1], got {v}")));
            }
        }
        if self.top_k == 0 {
            return Err(QueryError::Config("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Spo {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Spo {
    pub fn new(s: impl Into<String>, p: impl Into<String>, o: impl Into<String>) -> Self {
        Self { subject: s.into(), predicate: p.into(), object: o.into() }
    }
}

impl From<&Edge> for Spo {
    fn from(e: &Edge) -> Self {
        Spo::new(&e.subject, &e.predicate, &e.object)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappedNode {
    pub surface: String,
    pub node: String,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub sentence: String,
    pub triplet: Spo,
    pub similarity: f64,
}

/// Knowledge passed to the classifier. `ranked` is false when ranking and
/// filtering were disabled; only ranked lists are sorted by similarity.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RetrievedKnowledge {
    pub ranked: bool,
    pub items: Vec<KnowledgeItem>,
}

impl RetrievedKnowledge {
    pub fn empty() -> Self {
        Self { ranked: true, items: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.sentence.as_str())
    }
}

fn clean_entity(line: &str) -> &str {
    let line = line.trim();
    let line = line.trim_start_matches(|c: char| c.is_ascii_digit());
    let line = line.trim_start_matches(['.', ')', '-', '*', '•']).trim();
    line.trim_matches(['"', '\'', '`']).trim()
}

/// Parses a NER completion: one entity per line (or comma-separated),
/// list markers stripped, `none` ignored, first occurrence kept.
pub fn parse_entities(output: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in output.lines() {
        let line = line.trim();
        if line.is_empty() || line.eq_ignore_ascii_case("entities:") {
            continue;
        }
        let line = line.strip_prefix("Entities:").unwrap_or(line);
        for part in line.split(',') {
            let e = clean_entity(part);
            if e.is_empty() || e.eq_ignore_ascii_case("none") {
                continue;
            }
            if seen.insert(e.to_string()) {
                out.push(e.to_string());
            }
        }
    }
    out
}

pub fn extract_entities(text: &str, gw: &LlmGateway) -> Result<Vec<String>, QueryError> {
    let out = gw.complete_role(PromptRole::Ner, &BTreeMap::from([("text", text)]))?;
    Ok(parse_entities(&out))
}

/// Embeddings of every graph node, for dense node mapping.
pub struct NodeIndex {
    index: NearestNeighborIndex,
}

impl NodeIndex {
    pub fn build(graph: &KnowledgeGraph, embedder: &dyn Embedder) -> Result<Self, QueryError> {
        let index = NearestNeighborIndex::build(embedder, graph.nodes().iter().map(|n| (n.as_str(), n.as_str())))?;
        Ok(Self { index })
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Maps each entity to its most similar node; drops matches under `floor`
/// and keeps the first entity for any node reached twice.
pub fn map_nodes(
    entities: &[String],
    index: &NodeIndex,
    embedder: &dyn Embedder,
    floor: f64,
) -> Result<Vec<MappedNode>, QueryError> {
    let mut out: Vec<MappedNode> = Vec::new();
    if index.is_empty() {
        return Ok(out);
    }
    for entity in entities {
        let v = match embedder.embed(entity) {
            Ok(v) => v,
            Err(EmbeddingError::EmptyText) => continue,
            Err(e) => return Err(e.into()),
        };
        let Some((node, similarity)) = index.index.query(&v, 1)?.into_iter().next() else { continue };
        if !meets_threshold(similarity, floor) || out.iter().any(|m| m.node == node) {
            continue;
        }
        out.push(MappedNode { surface: entity.clone(), node, similarity });
    }
    Ok(out)
}

/// Breadth-first search from `source`, expanding incident edges in the
/// graph's (neighbour, s, p, o) order. Returns the parent edge of every
/// reached node.
fn bfs_tree<'g>(graph: &'g KnowledgeGraph, source: &'g str) -> HashMap<&'g str, &'g Edge> {
    let mut parent: HashMap<&str, &Edge> = HashMap::new();
    let mut visited: BTreeSet<&str> = BTreeSet::from([source]);
    let mut queue = VecDeque::from([source]);
    while let Some(node) = queue.pop_front() {
        for edge in graph.incident(node) {
            let next = edge.other(node);
            if visited.insert(next) {
                parent.insert(next, edge);
                queue.push_back(next);
            }
        }
    }
    parent
}

/// Candidate triplets for the mapped nodes.
///
/// `ShortestPath`: for every unordered pair `u < v`, the BFS path from `u`
/// to `v` over undirected edges, split into edges and unioned across pairs.
/// Pairs in different components contribute nothing. `OneHop`: every edge
/// incident to any of the nodes.
pub fn retrieve_paths(graph: &KnowledgeGraph, nodes: &[String], strategy: Strategy) -> Result<BTreeSet<Spo>, QueryError> {
    let mut distinct: Vec<&str> = Vec::new();
    for n in nodes {
        if !graph.contains_node(n) {
            return Err(QueryError::NodeNotInGraph(n.clone()));
        }
        distinct.push(n.as_str());
    }
    distinct.sort_unstable();
    distinct.dedup();

    let mut out = BTreeSet::new();
    match strategy {
        Strategy::OneHop => {
            for n in &distinct {
                out.extend(graph.incident(n).map(Spo::from));
            }
        }
        Strategy::ShortestPath => {
            for (i, &u) in distinct.iter().enumerate() {
                if i + 1 == distinct.len() {
                    break;
                }
                let parent = bfs_tree(graph, u);
                for &v in &distinct[i + 1..] {
                    if !parent.contains_key(v) {
                        log::debug!("no path between {u:?} and {v:?}");
                        continue;
                    }
                    let mut cur = v;
                    while cur != u {
                        let edge = parent[cur];
                        out.insert(Spo::from(edge));
                        cur = edge.other(cur);
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn format_knowledge(t: &Spo) -> String {
    format!("{} {} {}", t.subject, t.predicate, t.object)
}

/// Scores each formatted candidate against `text`, drops those under
/// `floor`, sorts descending (ties by sentence) and keeps `top_k`.
pub fn rank_filter(
    candidates: &BTreeSet<Spo>,
    text: &str,
    embedder: &dyn Embedder,
    floor: f64,
    top_k: usize,
) -> Result<RetrievedKnowledge, QueryError> {
    let query = embedder.embed(text)?;
    let mut items = Vec::new();
    for t in candidates {
        let sentence = format_knowledge(t);
        let similarity = cosine(&query, &embedder.embed(&sentence)?)?;
        if meets_threshold(similarity, floor) {
            items.push(KnowledgeItem { sentence, triplet: t.clone(), similarity });
        }
    }
    items.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then_with(|| a.sentence.cmp(&b.sentence)));
    items.truncate(top_k.max(1));
    Ok(RetrievedKnowledge { ranked: true, items })
}

/// Candidates in retrieval order with their similarity recorded but unused.
pub fn unranked(candidates: &BTreeSet<Spo>, text: &str, embedder: &dyn Embedder) -> Result<RetrievedKnowledge, QueryError> {
    let query = embedder.embed(text)?;
    let items = candidates
        .iter()
        .map(|t| {
            let sentence = format_knowledge(t);
            let similarity = cosine(&query, &embedder.embed(&sentence)?)?;
            Ok(KnowledgeItem { sentence, triplet: t.clone(), similarity })
        })
        .collect::<Result<Vec<_>, QueryError>>()?;
    Ok(RetrievedKnowledge { ranked: false, items })
}

/// Intermediate results of one query, for inspection.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryTrace {
    pub entities: Vec<String>,
    pub mapped: Vec<MappedNode>,
    pub candidates: usize,
    pub knowledge: RetrievedKnowledge,
}

/// A graph with its node embeddings, ready for repeated queries.
pub struct GraphQuerier<'a> {
    graph: &'a KnowledgeGraph,
    index: NodeIndex,
    config: QueryConfig,
}

impl<'a> GraphQuerier<'a> {
    pub fn new(graph: &'a KnowledgeGraph, embedder: &dyn Embedder, config: QueryConfig) -> Result<Self, QueryError> {
        config.validate()?;
        Ok(Self { graph, index: NodeIndex::build(graph, embedder)?, config })
    }

    pub fn config(&self) -> &QueryConfig {
        &self.config
    }

    pub fn trace(&self, text: &str, gw: &LlmGateway, embedder: &dyn Embedder) -> Result<QueryTrace, QueryError> {
        let mut trace = QueryTrace { knowledge: RetrievedKnowledge { ranked: self.config.rank_filter, items: vec![] }, ..Default::default() };
        trace.entities = extract_entities(text, gw)?;
        if trace.entities.is_empty() || self.graph.is_empty() {
            return Ok(trace);
        }
        trace.mapped = map_nodes(&trace.entities, &self.index, embedder, self.config.mapping_floor)?;
        if trace.mapped.is_empty() {
            return Ok(trace);
        }
        let nodes: Vec<String> = trace.mapped.iter().map(|m| m.node.clone()).collect();
        let candidates = retrieve_paths(self.graph, &nodes, self.config.strategy)?;
        trace.candidates = candidates.len();
        if candidates.is_empty() {
            return Ok(trace);
        }
        trace.knowledge = if self.config.rank_filter {
            rank_filter(&candidates, text, embedder, self.config.rank_floor, self.config.top_k)?
        } else {
            unranked(&candidates, text, embedder)?
        };
        Ok(trace)
    }

    pub fn query(&self, text: &str, gw: &LlmGateway, embedder: &dyn Embedder) -> Result<RetrievedKnowledge, QueryError> {
        Ok(self.trace(text, gw, embedder)?.knowledge)
    }
}

/// One-shot query; builds the node index each call.
pub fn query_graph(
    text: &str,
    graph: &KnowledgeGraph,
    gw: &LlmGateway,
    embedder: &dyn Embedder,
    config: &QueryConfig,
) -> Result<RetrievedKnowledge, QueryError> {
    GraphQuerier::new(graph, embedder, config.clone())?.query(text, gw, embedder)
}
