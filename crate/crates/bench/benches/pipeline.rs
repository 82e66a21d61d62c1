use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use metatox_bench::{candidates, random_graph, string_pool};
use metatox_core::embedding::{Embedder, TestEmbedder};
use metatox_core::kg_build::{resolve, ElementKind};
use metatox_core::query::{rank_filter, retrieve_paths, Strategy};

fn bench_retrieve(c: &mut Criterion) {
    let mut group = c.benchmark_group("retrieve_paths");
    for (nodes, edges) in [(50, 150), (500, 2000)] {
        let g = random_graph(nodes, edges, 7);
        let picked: Vec<String> = g.nodes().iter().step_by(nodes / 5).take(5).cloned().collect();
        for strategy in [Strategy::ShortestPath, Strategy::OneHop] {
            group.bench_with_input(BenchmarkId::new(format!("{strategy:?}"), nodes), &picked, |b, picked| {
                b.iter(|| retrieve_paths(&g, black_box(picked), strategy).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_resolve(c: &mut Criterion) {
    let e = TestEmbedder::new();
    let mut group = c.benchmark_group("resolve");
    for n in [40, 200] {
        let pool = string_pool(n, 11);
        group.bench_with_input(BenchmarkId::from_parameter(n), &pool, |b, pool| {
            b.iter(|| resolve(pool, ElementKind::Entity, &e, 0.9).unwrap())
        });
    }
    group.finish();
}

fn bench_embed(c: &mut Criterion) {
    let e = TestEmbedder::new();
    let text = "they are taking our jobs and ruining the country, send them all back";
    c.bench_function("test_embedder", |b| b.iter(|| e.embed(black_box(text)).unwrap()));
}

fn bench_rank(c: &mut Criterion) {
    let e = TestEmbedder::new();
    let set = candidates(100, 3);
    c.bench_function("rank_filter_100", |b| {
        b.iter(|| rank_filter(&set, black_box("immigrants take jobs from people"), &e, 0.35, 10).unwrap())
    });
}

criterion_group!(benches, bench_retrieve, bench_resolve, bench_embed, bench_rank);
criterion_main!(benches);
