use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ecrd::backend::ConditioningContext;
use ecrd::engine::{decode, Backends};
use ecrd::evidence::{CachePrecision, Evidence, EvidencePool, EvidenceScorer, Provenance};
use ecrd::supervisor::{mass_match, negotiate};
use ecrd::{fit_latency_model, knee_truncate};

use ecrd_bench::{
    chain_model, evidence_texts, flat_scoring_model, supervised_config, synthetic_distribution,
};

fn bench_knee_truncate(c: &mut Criterion) {
    let mut group = c.benchmark_group("knee_truncate");
    for &n in &[8usize, 64, 1024, 16384] {
        let dist = synthetic_distribution(n, n as u64);
        group.bench_with_input(BenchmarkId::from_parameter(n), &dist, |b, dist| {
            b.iter(|| knee_truncate(black_box(dist)).unwrap());
        });
    }
    group.finish();
}

fn bench_evidence_scoring(c: &mut Criterion) {
    let mut group = c.benchmark_group("evidence_scoring");
    let model = flat_scoring_model(64);
    let ctx = ConditioningContext::default();
    let base = synthetic_distribution(64, 7);
    let candidates = knee_truncate(&base).unwrap();
    for &pool_size in &[1usize, 4, 8] {
        let mut pool = EvidencePool::new();
        for (i, text) in evidence_texts(&vec![6; pool_size]).iter().enumerate() {
            pool.append(
                Evidence::new(
                    format!("ev{i}"),
                    text.clone(),
                    Provenance::GlobalDescription,
                    vec![],
                    &model,
                )
                .unwrap(),
            )
            .unwrap();
        }
        group.bench_with_input(BenchmarkId::new("cold", pool_size), &pool, |b, pool| {
            b.iter(|| {
                let scorer =
                    EvidenceScorer::new(&model, ctx.clone(), "", CachePrecision::Full).unwrap();
                scorer
                    .evidence_distribution(black_box(&candidates), black_box(pool))
                    .unwrap()
            });
        });
        group.bench_with_input(BenchmarkId::new("warm", pool_size), &pool, |b, pool| {
            let scorer =
                EvidenceScorer::new(&model, ctx.clone(), "", CachePrecision::Full).unwrap();
            scorer.evidence_distribution(&candidates, pool).unwrap();
            b.iter(|| {
                scorer
                    .evidence_distribution(black_box(&candidates), black_box(pool))
                    .unwrap()
            });
        });
    }
    group.finish();
}

fn bench_negotiate(c: &mut Criterion) {
    let base = synthetic_distribution(256, 3);
    let candidates = knee_truncate(&base).unwrap();
    let k = candidates.knee_index();
    let evidence = ecrd::EvidenceDistribution {
        entries: candidates.tokens().map(|t| (t, 1.0 / k as f64)).collect(),
        pooled_means: vec![1.0 / k as f64; k],
        degenerate: false,
    };
    let matched = mass_match(&evidence, &candidates).unwrap();
    c.bench_function("negotiate/256", |b| {
        b.iter(|| {
            negotiate(
                black_box(&base),
                black_box(&matched),
                black_box(&candidates),
            )
            .unwrap()
        });
    });
}

fn bench_full_decode(c: &mut Criterion) {
    let generation = chain_model(32, 32);
    let scoring = flat_scoring_model(32);
    let ctx = ConditioningContext::default();
    let cfg = supervised_config(32);
    c.bench_function("decode/supervisor_only/32_steps", |b| {
        b.iter(|| {
            let backends = Backends {
                generation: &generation,
                scoring: Some(&scoring),
                decider: None,
            };
            decode(black_box(&[ecrd::TokenId(0)]), &ctx, &cfg, &backends).unwrap()
        });
    });
}

fn bench_fit_latency(c: &mut Criterion) {
    let observations: Vec<(f64, f64)> = (0..1000)
        .map(|i| ((i % 5) as f64, 3.24 + 1.12 * (i % 5) as f64))
        .collect();
    c.bench_function("fit_latency/1000_obs", |b| {
        b.iter(|| fit_latency_model(black_box(&observations)).unwrap());
    });
}

criterion_group!(
    benches,
    bench_knee_truncate,
    bench_evidence_scoring,
    bench_negotiate,
    bench_full_decode,
    bench_fit_latency
);
criterion_main!(benches);
