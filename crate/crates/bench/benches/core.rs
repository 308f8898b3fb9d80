use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use iada_bench::fixture;
use iada_core::augment::{self, AugmentConfig};
use iada_core::eval;
use iada_core::importance;
use iada_core::objective::{self, Reduction};
use iada_core::Tape;

fn forward_backward(c: &mut Criterion) {
    let (model, pair) = fixture();
    c.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut tape = Tape::new(&model);
            let (_, loss, _) = objective::original_loss(&mut tape, &pair, Reduction::Mean).unwrap();
            black_box(tape.graph.backward(loss).unwrap());
        })
    });
}

fn scoring(c: &mut Criterion) {
    let (model, pair) = fixture();
    c.bench_function("gnorm", |b| b.iter(|| black_box(importance::gnorm(&model, &pair, Reduction::Mean).unwrap())));
    c.bench_function("tnorm", |b| b.iter(|| black_box(importance::tnorm_scores(&model, &pair).unwrap())));
    let cfg = AugmentConfig::default();
    c.bench_function("perturb_document", |b| {
        b.iter(|| black_box(augment::perturb_document(&model, &pair, &cfg, 7).unwrap()))
    });
}

fn bleu(c: &mut Criterion) {
    let hyps: Vec<Vec<u32>> = (0..500u32).map(|i| (0..20).map(|j| 5 + (i * 7 + j * 3) % 50).collect()).collect();
    let refs: Vec<Vec<u32>> = (0..500u32).map(|i| (0..20).map(|j| 5 + (i * 7 + j * 5) % 50).collect()).collect();
    c.bench_function("bleu_500x20", |b| b.iter(|| black_box(eval::bleu(&hyps, &refs).unwrap())));
}

criterion_group!(benches, forward_backward, scoring, bleu);
criterion_main!(benches);
