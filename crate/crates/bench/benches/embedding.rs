//! Throughput of sequence embedding, one training epoch, and index queries.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use tesr_core::ablation::{init_backbone, ExperimentSpec};
use tesr_core::data::{DescribedSequence, EventSequence, RetrievalDataset, Split};
use tesr_core::embed::embed_sequences;
use tesr_core::retrieval::{build_index, retrieve, EmbeddingIndex};
use tesr_core::synth::{build_benchmark, Describer, DomainSpec, SplitFractions};
use tesr_core::tensor::Mat;
use tesr_core::train::{train, TrainingConfig};

fn corpus() -> RetrievalDataset {
    let specs = [DomainSpec::stack_overflow()];
    build_benchmark(&specs, 256, Describer::Template, SplitFractions::default(), 0, None)
        .unwrap()
        .remove(0)
}

fn bench_embed(c: &mut Criterion) {
    let ds = corpus();
    let spec = ExperimentSpec::default();
    let model = init_backbone(&spec, &ds, 0).unwrap();
    let seqs: Vec<&EventSequence> = ds.items.iter().map(|d| &d.sequence).take(64).collect();
    let cfg = spec.embed_config();
    c.bench_function("embed_64_sequences", |b| {
        b.iter(|| embed_sequences(&model, black_box(&seqs), &cfg, 32).unwrap())
    });
    c.bench_function("build_index_64", |b| b.iter(|| build_index(black_box(&seqs), &model, &cfg).unwrap()));
}

fn bench_train_epoch(c: &mut Criterion) {
    let ds = corpus();
    let spec = ExperimentSpec {
        training: TrainingConfig { epochs: 1, ..Default::default() },
        ..Default::default()
    };
    let train_items: Vec<&DescribedSequence> = ds.split(Split::Train).into_iter().take(64).collect();
    let valid = ds.split(Split::Valid);
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("epoch_64_pairs", |b| {
        b.iter_batched(
            || init_backbone(&spec, &ds, 0).unwrap(),
            |mut model| {
                train(&mut model, &train_items, &valid, &spec.embed_config(), &spec.training, &spec.loss, &mut |_| {})
                    .unwrap()
            },
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

fn bench_retrieve(c: &mut Criterion) {
    let (n, dim) = (10_000, 64);
    let data: Vec<f32> = (0..n * dim).map(|i| ((i * 2_654_435_761usize) % 1000) as f32 / 500.0 - 1.0).collect();
    let ids = (0..n).map(|i| format!("s{i}")).collect();
    let index = EmbeddingIndex::from_vectors(ids, &Mat::from_vec(n, dim, data).unwrap()).unwrap();
    let query: Vec<f32> = (0..dim).map(|i| (i as f32).sin()).collect();
    c.bench_function("retrieve_top10_of_10k", |b| b.iter(|| retrieve(black_box(&query), &index, 10).unwrap()));
}

criterion_group!(benches, bench_embed, bench_train_epoch, bench_retrieve);
criterion_main!(benches);
