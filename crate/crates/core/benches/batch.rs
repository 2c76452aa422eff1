//! Batch extraction and page scoring, sequential against the rayon pool.
//! Without the `parallel` feature only the sequential runs are registered.

use std::hint::black_box;
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

use ctiflow::classifier::{
    synthetic, train_baseline, BaselineScorer, ChunkingPolicy, Scorer, TrainConfig,
};
use ctiflow::extractor::Extractor;
use ctiflow::model::Granularity;
use ctiflow::par;

fn pages(n: usize) -> Vec<String> {
    synthetic::separable_corpus(n, 3)
        .into_iter()
        .enumerate()
        .map(|(i, (text, _))| {
            // Pad to a few kilobytes with indicators so extraction does real work.
            let mut page = text.repeat(20);
            page.push_str(&format!(
                " beacon hxxp://10.0.{}.{}/gate.php hash d282e137db2d55ae8fd3a299136f277e{:08x} host c2-{i}[.]example[.]com",
                i % 256,
                (i * 7) % 256,
                i
            ));
            page
        })
        .collect()
}

fn extraction(c: &mut Criterion) {
    let docs = pages(256);
    let bytes: usize = docs.iter().map(String::len).sum();
    let ex = Extractor::default();
    let at = Utc.with_ymd_and_hms(2023, 1, 1, 0, 0, 0).unwrap();
    let mut g = c.benchmark_group("extract_batch");
    g.throughput(Throughput::Bytes(bytes as u64));
    g.bench_function(BenchmarkId::new("sequential", docs.len()), |b| {
        b.iter(|| par::map_sequential(black_box(&docs), |d| ex.extract(d, at)))
    });
    #[cfg(feature = "parallel")]
    g.bench_function(BenchmarkId::new("parallel", docs.len()), |b| {
        b.iter(|| par::map_parallel(black_box(&docs), |d| ex.extract(d, at)))
    });
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let corpus = synthetic::separable_corpus(200, 9);
    let model = train_baseline(&corpus, &TrainConfig::default())
        .unwrap()
        .model;
    let scorer = BaselineScorer::new(Arc::new(model), ChunkingPolicy::default(), 0.5).unwrap();
    let docs = pages(128);
    let mut g = c.benchmark_group("score_pages");
    g.throughput(Throughput::Elements(docs.len() as u64));
    g.bench_function(BenchmarkId::new("sequential", docs.len()), |b| {
        b.iter(|| {
            par::map_sequential(black_box(&docs), |d| {
                scorer.score(d, Granularity::Page).unwrap()
            })
        })
    });
    #[cfg(feature = "parallel")]
    g.bench_function(BenchmarkId::new("parallel", docs.len()), |b| {
        b.iter(|| {
            par::map_parallel(black_box(&docs), |d| {
                scorer.score(d, Granularity::Page).unwrap()
            })
        })
    });
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = extraction, scoring
}
criterion_main!(benches);
