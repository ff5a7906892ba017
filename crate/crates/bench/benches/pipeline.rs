use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mbvr_core::datagen::{generate, DatasetSpec};
use mbvr_core::encoders::{encode_videos, ModelConfig, ModelParams, TokenId, VideoRepr};
use mbvr_core::harness::{train, TrainConfig, Variant};
use mbvr_core::losses::{generate_ms_negatives, total_loss, BatchEmbeddings, MsSampling};
use mbvr_core::numcore::kernels::matmul;
use mbvr_core::retrieval::{build_index, top_k};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = random_matrix(&mut rng, 64 * 64);
    let b = random_matrix(&mut rng, 64 * 64);
    c.bench_function("matmul 64x64x64", |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b), 64, 64, 64))
    });
}

fn small_spec() -> DatasetSpec {
    DatasetSpec {
        corpus_size: 2000,
        num_queries: 64,
        pairs_per_query: 10,
        eval_queries: 20,
        ..DatasetSpec::default()
    }
}

fn encoding_and_search(c: &mut Criterion) {
    let ds = generate(&small_spec()).unwrap();
    let params = ModelParams::init(ModelConfig::default(), 0).unwrap();
    let tokens: Vec<&[TokenId]> = ds.corpus.iter().map(|v| v.text_tokens.as_slice()).collect();
    let features: Vec<&[f64]> = ds.corpus.iter().map(|v| v.vision_features.as_slice()).collect();
    c.bench_function("encode 2000 videos", |b| {
        b.iter(|| encode_videos(&params, &tokens, &features).unwrap())
    });

    let index = build_index(&ds.corpus, &params, VideoRepr::Fused, 0).unwrap();
    let query = index.embeddings().row(0).to_vec();
    c.bench_function("top-10 over 2000", |b| {
        b.iter(|| top_k(&index, black_box(&query), 10).unwrap())
    });
}

fn objective(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let params = ModelParams::init(ModelConfig::default(), 1).unwrap();
    let ds = generate(&small_spec()).unwrap();
    let videos = &ds.corpus[..64];
    let tokens: Vec<&[TokenId]> = videos.iter().map(|v| v.text_tokens.as_slice()).collect();
    let features: Vec<&[f64]> = videos.iter().map(|v| v.vision_features.as_slice()).collect();
    let emb = encode_videos(&params, &tokens, &features).unwrap();
    let batch = BatchEmbeddings {
        query: emb.text.clone(),
        text: emb.text.clone(),
        vision: emb.vision.clone(),
        fused: emb.fused.clone(),
    };
    let (indices, ms) = generate_ms_negatives(
        &emb.text,
        &emb.vision,
        &params.fusion,
        32,
        MsSampling::Uniform,
        &mut rng,
    )
    .unwrap();
    let cfg = Default::default();
    c.bench_function("full objective, batch 64, M=32", |b| {
        b.iter(|| total_loss(&batch, &ms, &indices, &cfg).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let ds = generate(&small_spec()).unwrap();
    let mut group = c.benchmark_group("train epoch of 10 batches");
    group.sample_size(10);
    for variant in [Variant::Base, Variant::Mbvr] {
        let cfg = TrainConfig {
            variant,
            epochs: 1,
            ..TrainConfig::default()
        };
        group.bench_function(variant.name(), |b| {
            b.iter_batched(
                || cfg.clone(),
                |cfg| train(&cfg, &ds, None).unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, kernels, encoding_and_search, objective, training);
criterion_main!(benches);
