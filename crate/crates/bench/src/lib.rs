//! Seeded input generators shared by the benchmarks.

use std::collections::BTreeSet;

use metatox_core::kg_build::Triplet;
use metatox_core::kg_store::KnowledgeGraph;
use metatox_core::query::Spo;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 16] = [
    "group", "people", "immigrants", "women", "crime", "jobs", "border", "country", "religion", "culture", "vote",
    "rights", "family", "city", "school", "police",
];

pub fn phrase(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..=3);
    (0..n).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

pub fn random_graph(nodes: usize, edges: usize, seed: u64) -> KnowledgeGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triplets = (0..edges).map(|i| {
        let s = rng.random_range(0..nodes);
        let o = rng.random_range(0..nodes);
        Triplet::new(format!("n{s:03}"), format!("r{}", i % 7), format!("n{o:03}")).with_source(format!("s{i}"))
    });
    KnowledgeGraph::from_triplets(triplets.collect::<Vec<_>>())
}

pub fn string_pool(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| phrase(&mut rng)).collect()
}

pub fn candidates(n: usize, seed: u64) -> BTreeSet<Spo> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Spo::new(phrase(&mut rng), phrase(&mut rng), phrase(&mut rng))).collect()
}
