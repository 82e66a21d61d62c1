//! Entity and relation resolution by embedding-threshold clustering.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine, Embedder, EmbeddingError, EmbeddingVector};

/// Slack applied when comparing a similarity against the threshold, so that
/// vectors equal up to rounding still meet a threshold of 1.0.
pub const SIMILARITY_EPSILON: f64 = 1e-9;

pub fn meets_threshold(similarity: f64, threshold: f64) -> bool {
    similarity + SIMILARITY_EPSILON >= threshold
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Entity,
    Relation,
}

/// Surface form → canonical name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub kind: ElementKind,
    pub threshold: f64,
    pub assignments: BTreeMap<String, String>,
}

impl ClusterMap {
    pub fn empty(kind: ElementKind, threshold: f64) -> Self {
        Self { kind, threshold, assignments: BTreeMap::new() }
    }

    pub fn canonical(&self, surface: &str) -> Option<&str> {
        self.assignments.get(surface).map(String::as_str)
    }

    pub fn is_identity(&self) -> bool {
        self.assignments.iter().all(|(k, v)| k == v)
    }

    /// Canonical name → sorted members.
    pub fn clusters(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut out: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for (surface, canon) in &self.assignments {
            out.entry(canon.as_str()).or_default().push(surface.as_str());
        }
        out
    }

    /// Distinct canonical names.
    pub fn canonical_names(&self) -> Vec<&str> {
        self.clusters().into_keys().collect()
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // lower index becomes the root so roots are stable
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Clusters the distinct surface forms of `elements`, counting repeats as votes.
pub fn resolve<S: AsRef<str>>(
    elements: &[S],
    kind: ElementKind,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<ClusterMap, EmbeddingError> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for e in elements {
        *counts.entry(e.as_ref().to_string()).or_default() += 1;
    }
    resolve_counts(&counts, kind, embedder, threshold)
}

/// Single-link clustering over surface forms with precomputed frequencies.
///
/// Forms are processed in lexicographic order; any pair with cosine
/// similarity at or above `threshold` joins one cluster. Each cluster is
/// named after its most frequent member, ties going to the
/// lexicographically smallest.
pub fn resolve_counts(
    counts: &BTreeMap<String, u64>,
    kind: ElementKind,
    embedder: &dyn Embedder,
    threshold: f64,
) -> Result<ClusterMap, EmbeddingError> {
    let forms: Vec<&String> = counts.keys().collect();
    let vectors: Vec<EmbeddingVector> = forms.par_iter().map(|f| embedder.embed(f)).collect::<Result<_, _>>()?;

    let links: Vec<Vec<usize>> = (0..forms.len())
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::new();
            for j in i + 1..forms.len() {
                if meets_threshold(cosine(&vectors[i], &vectors[j])?, threshold) {
                    row.push(j);
                }
            }
            Ok(row)
        })
        .collect::<Result<_, EmbeddingError>>()?;

    let mut sets = DisjointSet::new(forms.len());
    for (i, row) in links.iter().enumerate() {
        for &j in row {
            sets.union(i, j);
        }
    }

    // root → (best count, best form); forms iterate in ascending order so the
    // first form seen at the best count is the lexicographic minimum
    let mut winners: BTreeMap<usize, (u64, usize)> = BTreeMap::new();
    for (i, form) in forms.iter().enumerate() {
        let root = sets.find(i);
        let c = counts[*form];
        winners
            .entry(root)
            .and_modify(|w| {
                if c > w.0 {
                    *w = (c, i);
                }
            })
            .or_insert((c, i));
    }

    let mut assignments = BTreeMap::new();
    for (i, form) in forms.iter().enumerate() {
        let root = sets.find(i);
        assignments.insert((*form).clone(), forms[winners[&root].1].clone());
    }
    Ok(ClusterMap { kind, threshold, assignments })
}
