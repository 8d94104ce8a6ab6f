//! Sequential against rayon-parallel execution of the per-sample hot paths.
//! Both executors produce bit-identical results; only wall time differs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pace_core::corpus::{generate_corpus, generate_corpus_with, CorpusSpec};
use pace_core::losses::cross_entropy;
use pace_core::pacer::PaceConfig;
use pace_core::par::Exec;
use pace_core::rng::StreamRng;
use pace_core::tensornet::{Model, Upstream};
use pace_core::trainer::{build_batch_same_context, ContrastiveMode, TrainConfig};

const EXECS: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_corpus(c: &mut Criterion) {
    let spec = CorpusSpec {
        num_videos: 24,
        ..CorpusSpec::default()
    };
    let mut group = c.benchmark_group("generate_corpus");
    group.sample_size(10);
    for (name, exec) in EXECS {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_corpus_with(black_box(&spec), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let corpus = generate_corpus(&CorpusSpec {
        num_videos: 48,
        ..CorpusSpec::default()
    })
    .unwrap();
    let mut cfg = TrainConfig::new(PaceConfig::relative(4).unwrap(), 3);
    cfg.contrastive = ContrastiveMode::SameContext;
    cfg.batch_videos = 4;
    let mut group = c.benchmark_group("batch_forward_backward");
    group.sample_size(10);
    for (name, exec) in EXECS {
        let cfg = TrainConfig { exec, ..cfg.clone() };
        let batch = build_batch_same_context(&corpus, &cfg, &mut StreamRng::new(0)).unwrap();
        let mut model = Model::<f32>::new(cfg.model.clone(), 0).unwrap().with_exec(exec);
        group.bench_function(BenchmarkId::new("step", name), |b| {
            b.iter(|| {
                let out = model.forward(black_box(&batch.clips)).unwrap();
                let (_, g) = cross_entropy(&out.logits, &batch.pace_labels).unwrap();
                let grads = model
                    .backward(&Upstream {
                        logits: Some(g),
                        ..Default::default()
                    })
                    .unwrap();
                model.clear_cache();
                grads
            })
        });
        group.bench_function(BenchmarkId::new("batch_assembly", name), |b| {
            b.iter(|| build_batch_same_context(&corpus, &cfg, &mut StreamRng::new(1)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_corpus, bench_train_step);
criterion_main!(benches);
