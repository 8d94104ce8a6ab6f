use std::collections::BTreeMap;

use pace_core::corpus::{generate_corpus, Corpus, CorpusSpec, Split};
use pace_core::losses::{cross_entropy, LossWeights, SimilarityMode};
use pace_core::pacer::{random_clip, PaceConfig};
use pace_core::par::Exec;
use pace_core::rng::StreamRng;
use pace_core::tensornet::checkpoint::load_checkpoint;
use pace_core::tensornet::{BlockConfig, InputShape, Model, ModelConfig, PoolKind};
use pace_core::trainer::{
    batch_objective, build_batch_same_context, build_batch_same_pace, clip_to_input, epoch_batches, lr_schedule,
    pretrain, validation_set, ContrastiveMode, TrainConfig,
};

fn corpus(n: usize) -> Corpus {
    generate_corpus(&CorpusSpec {
        num_videos: n,
        frames: 32,
        seed: 3,
        ..CorpusSpec::default()
    })
    .unwrap()
}

/// A fast schedule around a narrow network on 8x24x24 clips.
fn small_config(mode: ContrastiveMode) -> TrainConfig {
    let pace = PaceConfig::relative(4).unwrap();
    let mut cfg = TrainConfig::new(pace, 3);
    cfg.clip_len = 8;
    cfg.crop = (24, 24);
    cfg.batch_videos = 4;
    cfg.epochs = 2;
    cfg.epoch_size = Some(12);
    cfg.lr = 1e-2;
    cfg.contrastive = mode;
    cfg.model = ModelConfig {
        blocks: vec![
            BlockConfig::conv3d(4, PoolKind::Spatial),
            BlockConfig::conv3d(8, PoolKind::Full),
            BlockConfig::conv3d(8, PoolKind::Full),
        ],
        ..ModelConfig::tiny(
            InputShape {
                channels: 3,
                frames: 8,
                height: 24,
                width: 24,
            },
            4,
        )
    };
    cfg
}

#[test]
fn same_context_batches_pair_rows_by_video() {
    let corpus = corpus(30);
    let mut cfg = small_config(ContrastiveMode::SameContext);
    cfg.batch_videos = 8;
    let mut rng = StreamRng::new(1);
    for _ in 0..5 {
        let b = build_batch_same_context(&corpus, &cfg, &mut rng).unwrap();
        assert_eq!(b.clips.dims(), &[16, 3, 8, 24, 24]);
        let mut counts = BTreeMap::new();
        for &v in &b.video_ids {
            *counts.entry(v).or_insert(0) += 1;
            assert_eq!(corpus.split[v], Split::Train);
        }
        assert_eq!(counts.len(), 8);
        assert!(counts.values().all(|&c| c == 2));
        for i in 0..8 {
            assert_eq!(b.video_ids[i], b.video_ids[i + 8]);
        }
    }
}

#[test]
fn same_pace_batches_hold_distinct_videos() {
    let corpus = corpus(30);
    let cfg = small_config(ContrastiveMode::SamePace);
    let b = build_batch_same_pace(&corpus, &cfg, &mut StreamRng::new(2)).unwrap();
    let mut ids = b.video_ids.clone();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 4);
    let mut big = cfg.clone();
    big.batch_videos = 100;
    assert!(build_batch_same_pace(&corpus, &big, &mut StreamRng::new(2)).is_err());
}

#[test]
fn pace_labels_are_uniform() {
    let corpus = corpus(6);
    let pace = PaceConfig::relative(4).unwrap();
    let mut rng = StreamRng::new(9);
    let draws = 20_000;
    let mut hist = [0usize; 4];
    for i in 0..draws {
        let (_, label, _) = random_clip(&corpus.videos[i % 6], &pace, 4, &mut rng).unwrap();
        hist[label.0] += 1;
    }
    for h in hist {
        let f = h as f64 / draws as f64;
        assert!((f - 0.25).abs() < 0.02, "{hist:?}");
    }
}

#[test]
fn batches_are_deterministic_across_executors() {
    let corpus = corpus(30);
    let mut seq = small_config(ContrastiveMode::SameContext);
    seq.exec = Exec::Sequential;
    let mut par = seq.clone();
    par.exec = Exec::Parallel;
    let a = build_batch_same_context(&corpus, &seq, &mut StreamRng::new(5)).unwrap();
    let b = build_batch_same_context(&corpus, &par, &mut StreamRng::new(5)).unwrap();
    assert_eq!(a, b);
    let c = build_batch_same_context(&corpus, &seq, &mut StreamRng::new(6)).unwrap();
    assert_ne!(a.clips, c.clips);
}

#[test]
fn step_decay_schedule() {
    let cfg = TrainConfig::new(PaceConfig::relative(4).unwrap(), 3);
    for (epoch, want) in [(0, 1e-3), (5, 1e-3), (6, 1e-4), (11, 1e-4), (12, 1e-5), (17, 1e-5)] {
        let lr = lr_schedule(epoch, &cfg);
        assert!((lr - want).abs() <= 1e-12 * want.max(1.0), "epoch {epoch}: {lr}");
    }
}

#[test]
fn standardized_input_has_zero_mean_unit_variance_per_frame() {
    let corpus = corpus(6);
    let pace = PaceConfig::relative(4).unwrap();
    let (clip, _, _) = random_clip(&corpus.videos[0], &pace, 5, &mut StreamRng::new(0)).unwrap();
    let x = clip_to_input(&clip);
    let v = &clip.frames;
    let (t_len, plane) = (v.frames(), v.height() * v.width());
    for t in 0..t_len {
        let vals: Vec<f64> = (0..v.channels())
            .flat_map(|c| {
                let base = (c * t_len + t) * plane;
                x[base..base + plane].iter().map(|&p| p as f64)
            })
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-5, "frame {t}: mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "frame {t}: var {var}");
    }
}

#[test]
fn epoch_order_never_repeats_a_video_inside_a_batch() {
    let corpus = corpus(30);
    let mut cfg = small_config(ContrastiveMode::SameContext);
    cfg.batch_videos = 7;
    cfg.epoch_size = Some(100);
    let batches = epoch_batches(&corpus, &cfg, 3);
    assert_eq!(batches.len(), 100usize.div_ceil(7));
    for b in &batches {
        assert!(b.len() >= 2);
        let mut ids = b.clone();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), b.len());
        assert!(b.iter().all(|&v| corpus.split[v] == Split::Train));
    }
    assert_eq!(batches, epoch_batches(&corpus, &cfg, 3));
    assert_ne!(batches, epoch_batches(&corpus, &cfg, 4));
}

#[test]
fn validation_set_is_fixed_and_balanced() {
    let corpus = corpus(30);
    let cfg = small_config(ContrastiveMode::None);
    let (vids, inputs, labels) = validation_set(&corpus, &cfg).unwrap();
    let test = corpus.indices(Split::Test);
    assert_eq!(vids.len(), test.len() * cfg.val_clips_per_video);
    let mut hist = [0usize; 4];
    for &l in &labels {
        hist[l] += 1;
    }
    let (lo, hi) = (hist.iter().min().unwrap(), hist.iter().max().unwrap());
    assert!(hi - lo <= 1, "{hist:?}");
    let again = validation_set(&corpus, &cfg).unwrap();
    assert_eq!(inputs, again.1);
}

#[test]
fn degenerate_same_pace_batch_skips_the_contrastive_term() {
    let cfg = small_config(ContrastiveMode::SamePace);
    let model = Model::<f64>::new(cfg.model.clone(), 0).unwrap();
    let i = cfg.model.input;
    let x = pace_core::tensornet::Tensor::from_fn(&[4, i.channels, i.frames, i.height, i.width], |k| {
        ((k * 7919) % 13) as f64 / 13.0
    });
    let out = model.infer(&x).unwrap();
    let w = LossWeights { cls: 1.0, ctr: 0.5 };
    let (lb, up) = batch_objective(&out, &[0, 1, 2, 3], &[0, 1, 2, 3], ContrastiveMode::SamePace, SimilarityMode::Normalized, &w)
        .unwrap();
    assert!(lb.ctr_skipped);
    assert_eq!(lb.ctr, None);
    assert!(up.projection.is_none());
    assert_eq!(lb.total, lb.cls);
    let (lb, up) = batch_objective(&out, &[0, 0, 2, 2], &[0, 1, 2, 3], ContrastiveMode::SamePace, SimilarityMode::Normalized, &w)
        .unwrap();
    assert!(!lb.ctr_skipped);
    assert!(up.projection.is_some());
    assert!((lb.total - (lb.cls + 0.5 * lb.ctr.unwrap())).abs() < 1e-12);
}

#[test]
fn uniform_classifier_starts_at_ln_m() {
    let corpus = corpus(30);
    let cfg = small_config(ContrastiveMode::None);
    let mut model = Model::<f32>::new(cfg.model.clone(), 17).unwrap();
    for name in ["classifier.weight", "classifier.bias"] {
        model.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let (_, inputs, labels) = validation_set(&corpus, &cfg).unwrap();
    let i = cfg.model.input;
    let data: Vec<f32> = inputs.iter().flatten().copied().collect();
    let x = pace_core::tensornet::Tensor::new(vec![inputs.len(), i.channels, i.frames, i.height, i.width], data).unwrap();
    let out = model.infer(&x).unwrap();
    let (loss, _) = cross_entropy(&out.logits, &labels).unwrap();
    assert!((loss as f64 - 4f64.ln()).abs() < 1e-6, "{loss}");
}

#[test]
fn zero_contrastive_weight_matches_pace_only_bit_for_bit() {
    let corpus = corpus(30);
    let none = small_config(ContrastiveMode::None);
    let mut zero = small_config(ContrastiveMode::SamePace);
    zero.weights = LossWeights { cls: 1.0, ctr: 0.0 };
    let a = pretrain(&corpus, &none, None).unwrap();
    let b = pretrain(&corpus, &zero, None).unwrap();
    assert_eq!(a.model.params, b.model.params);
    for (x, y) in a.metrics.iter().zip(&b.metrics) {
        assert_eq!(x.loss.to_bits(), y.loss.to_bits());
        assert_eq!(x.val_pace_acc, y.val_pace_acc);
    }
}

#[test]
fn pretraining_writes_metrics_and_loadable_checkpoints() {
    let corpus = corpus(30);
    let cfg = small_config(ContrastiveMode::SameContext);
    let dir = tempfile::tempdir().unwrap();
    let result = pretrain(&corpus, &cfg, Some(dir.path())).unwrap();
    let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), cfg.epochs);
    for (line, m) in lines.lines().zip(&result.metrics) {
        let parsed: pace_core::trainer::EpochMetrics = serde_json::from_str(line).unwrap();
        assert_eq!(&parsed, m);
        assert!(m.ctr_loss > 0.0 && m.loss.is_finite());
    }
    let last = load_checkpoint(dir.path().join(format!("epoch_{:03}.pck", cfg.epochs - 1)), &cfg.model).unwrap();
    assert_eq!(last.params, result.model.params);
    let fin = load_checkpoint(dir.path().join("final.pck"), &cfg.model).unwrap();
    assert_eq!(fin.params, result.model.params);
}

#[test]
fn invalid_configs_name_the_field() {
    let mut cfg = small_config(ContrastiveMode::None);
    cfg.crop = (16, 16);
    match cfg.validate() {
        Err(pace_core::Error::Config { field, .. }) => assert_eq!(field, "model.input"),
        other => panic!("{other:?}"),
    }
    let mut cfg = small_config(ContrastiveMode::None);
    cfg.pace = PaceConfig::relative(3).unwrap();
    match cfg.validate() {
        Err(pace_core::Error::Config { field, .. }) => assert_eq!(field, "model.num_classes"),
        other => panic!("{other:?}"),
    }
    let mut cfg = small_config(ContrastiveMode::None);
    cfg.lr = 0.0;
    assert!(cfg.validate().is_err());
}

#[test]
fn contrastive_mode_parses() {
    assert_eq!("same_pace".parse::<ContrastiveMode>().unwrap(), ContrastiveMode::SamePace);
    assert!("both".parse::<ContrastiveMode>().is_err());
}
