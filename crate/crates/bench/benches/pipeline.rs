use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use memaudit_bench::{corpus, model, samples};
use memaudit_core::dedup::dedup_ranked;
use memaudit_core::generation::{beam_extend, generate_sample, SamplerConfig};
use memaudit_core::ground_truth::{build_index, DEFAULT_PROXIMITY_FACTOR};
use memaudit_core::lm::LanguageModel;
use memaudit_core::metrics::{score_text_metrics, MetricKind, MetricModels};
use memaudit_core::pipeline::select::rank_schedule;

fn bench_model(c: &mut Criterion) {
    let corpus = corpus(300);
    c.bench_function("train order 5 on 300 docs", |b| b.iter(|| model(black_box(&corpus), 5)));
    let m = model(&corpus, 5);
    let text = &corpus.documents()[0].text;
    c.bench_function("top_k 40", |b| b.iter(|| m.top_k_text(black_box(text), 40).unwrap()));
    c.bench_function("score 256 chars", |b| {
        let t: String = text.chars().cycle().take(256).collect();
        b.iter(|| m.score_text(black_box(&t)).unwrap())
    });
}

fn bench_sampling(c: &mut Criterion) {
    let corpus = corpus(300);
    let m = model(&corpus, 5);
    let cfg = SamplerConfig {
        max_tokens: 256,
        ..Default::default()
    };
    let mut id = 0u64;
    c.bench_function("generate 256-token sample", |b| {
        b.iter(|| {
            id += 1;
            generate_sample(&m, &cfg, None, id).unwrap()
        })
    });
    c.bench_function("beam width 10, 32 steps", |b| b.iter(|| beam_extend(&m, "The ", 10, 32).unwrap()));
}

fn bench_metrics(c: &mut Criterion) {
    let corpus = corpus(300);
    let (target, small, medium) = (model(&corpus, 5), model(&corpus, 2), model(&corpus, 3));
    let s = samples(&target, 1, 256).remove(0);
    let models = MetricModels {
        target: &target,
        small: Some(&small),
        medium: Some(&medium),
    };
    c.bench_function("all six metrics, one sample", |b| {
        b.iter(|| score_text_metrics(black_box(&s.text), &MetricKind::ALL, models).unwrap())
    });
}

fn bench_dedup_verify(c: &mut Criterion) {
    let corpus = corpus(300);
    let m = model(&corpus, 5);
    let pool = samples(&m, 1000, 128);
    c.bench_function("dedup 1000 samples", |b| {
        b.iter_batched(
            || pool.iter().map(|s| (s.sample_id, s.text.as_str())).collect::<Vec<_>>(),
            |items| dedup_ranked(items, Some(1000)),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("build index, 300 docs", |b| b.iter(|| build_index(black_box(&corpus))));
    let index = build_index(&corpus);
    let words: Vec<&str> = memaudit_core::dedup::words(&corpus.documents()[7].text).take(30).collect();
    let candidate = words.join(" ");
    c.bench_function("fuzzy verify 30 words", |b| {
        b.iter(|| index.fuzzy_3gram_verify(black_box(&candidate), DEFAULT_PROXIMITY_FACTOR).unwrap())
    });
    c.bench_function("rank schedule 1000/100", |b| b.iter(|| rank_schedule(black_box(1000), 100).unwrap()));
}

criterion_group!(benches, bench_model, bench_sampling, bench_metrics, bench_dedup_verify);
criterion_main!(benches);
