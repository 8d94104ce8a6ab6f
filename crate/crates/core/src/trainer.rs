//! Batch assembly for the two contrastive variants, the pretraining loop,
//! its learning-rate schedule and per-epoch metrics/checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_clip, center_crop, AugmentConfig, JitterParams};
use crate::corpus::{Corpus, Split, VideoTensor};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, ctr_same_context, ctr_same_pace, EmbeddingBatch, LossWeights, SimilarityMode,
};
use crate::pacer::{random_clip, sample_clip, Clip, PaceConfig, PaceLabel};
use crate::par::Exec;
use crate::rng::{derive_key, domain, StreamRng};
use crate::tensornet::checkpoint::save_checkpoint;
use crate::tensornet::{ForwardOutput, InputShape, Model, ModelConfig, Scalar, Sgd, Tensor, Upstream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveMode {
    None,
    SameContext,
    SamePace,
}

impl std::str::FromStr for ContrastiveMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "same_context" => Ok(Self::SameContext),
            "same_pace" => Ok(Self::SamePace),
            other => Err(Error::config(
                "train.contrastive",
                format!("`{other}` is not one of none, same_context, same_pace"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pace: PaceConfig,
    pub clip_len: usize,
    pub crop: (usize, usize),
    /// Videos per batch (`N`); same-context batches hold `2N` clips.
    pub batch_videos: usize,
    pub contrastive: ContrastiveMode,
    pub weights: LossWeights,
    pub similarity: SimilarityMode,
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Clips per epoch; `None` means ten per training video.
    pub epoch_size: Option<usize>,
    pub jitter: Option<JitterParams>,
    pub flip_probability: f64,
    /// Fixed held-out clips per test video used for `val_pace_acc`.
    pub val_clips_per_video: usize,
    pub model: ModelConfig,
    pub seed: u64,
    pub exec: Exec,
}

impl TrainConfig {
    /// Paper-faithful schedule at desk scale around the tiny network.
    pub fn new(pace: PaceConfig, channels: usize) -> Self {
        let clip_len = 16;
        let crop = (32, 32);
        let model = ModelConfig::tiny(
            InputShape {
                channels,
                frames: clip_len,
                height: crop.0,
                width: crop.1,
            },
            pace.num_classes(),
        );
        Self {
            pace,
            clip_len,
            crop,
            batch_videos: 16,
            contrastive: ContrastiveMode::None,
            weights: LossWeights::default(),
            similarity: SimilarityMode::Normalized,
            lr: 1e-3,
            lr_decay_every: 6,
            lr_decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 18,
            epoch_size: None,
            jitter: Some(JitterParams::default()),
            flip_probability: 0.5,
            val_clips_per_video: 4,
            model,
            seed: 0,
            exec: Exec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("train.lr", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.lr_decay_every == 0 {
            return Err(Error::config("train.lr_decay_every", "must be at least 1"));
        }
        if !(self.lr_decay_factor >= 1.0) {
            return Err(Error::config("train.lr_decay_factor", "must be at least 1"));
        }
        if self.batch_videos < 2 {
            return Err(Error::config("train.batch_videos", "need at least two videos per batch"));
        }
        if self.clip_len == 0 {
            return Err(Error::config("train.clip_len", "must be positive"));
        }
        self.weights.validate()?;
        let i = self.model.input;
        if (i.frames, i.height, i.width) != (self.clip_len, self.crop.0, self.crop.1) {
            return Err(Error::config(
                "model.input",
                format!(
                    "model expects {}x{}x{} clips but training produces {}x{}x{}",
                    i.frames, i.height, i.width, self.clip_len, self.crop.0, self.crop.1
                ),
            ));
        }
        if self.model.num_classes != self.pace.num_classes() {
            return Err(Error::config(
                "model.num_classes",
                format!(
                    "classifier has {} outputs but the pace set has {}",
                    self.model.num_classes,
                    self.pace.num_classes()
                ),
            ));
        }
        self.model.layout()?;
        Ok(())
    }

    pub fn clips_per_video(&self) -> usize {
        match self.contrastive {
            ContrastiveMode::SameContext => 2,
            _ => 1,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            crop: self.crop,
            flip_probability: self.flip_probability,
            jitter: self.jitter,
        }
    }
}

/// Step decay: `lr / factor^floor(epoch / every)`.
pub fn lr_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr / config.lr_decay_factor.powi((epoch / config.lr_decay_every) as i32)
}

/// Converts a channel-last clip to a channel-first `[C, L, h, w]` network
/// input, standardizing every frame to zero mean and unit variance over its
/// pixels and channels. Frame-level brightness and contrast then carry no
/// signal, only spatial structure does.
pub fn clip_to_input(clip: &Clip) -> Vec<f32> {
    let v = &clip.frames;
    let (t_len, h, w, c) = (v.frames(), v.height(), v.width(), v.channels());
    let mut out = vec![0.0f32; c * t_len * h * w];
    let n = (h * w * c) as f64;
    for t in 0..t_len {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let p = v.get(t, y, x, ch) as f64;
                    sum += p;
                    sq += p * p;
                }
            }
        }
        let mean = sum / n;
        let std = (sq / n - mean * mean).max(0.0).sqrt();
        let inv = 1.0 / std.max(INPUT_STD_FLOOR);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[((ch * t_len + t) * h + y) * w + x] = ((v.get(t, y, x, ch) as f64 - mean) * inv) as f32;
                }
            }
        }
    }
    out
}

/// Lower bound on the per-frame deviation used to standardize; keeps flat
/// frames finite.
pub const INPUT_STD_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// `[B, C, L, h, w]`.
    pub clips: Tensor<f32>,
    pub pace_labels: Vec<usize>,
    pub video_ids: Vec<usize>,
}

/// Builds a batch from the given (distinct) videos. Row `r` draws from its
/// own stream keyed by one value taken from `rng`, so rows can be assembled
/// in parallel. With two clips per video, rows `i` and `i + N` share a video.
pub fn build_batch(
    corpus: &Corpus,
    videos: &[usize],
    config: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<TrainBatch> {
    let batch_key = rng.next_u64();
    let per_video = config.clips_per_video();
    let n = videos.len();
    let rows: Vec<usize> = (0..n * per_video).map(|r| videos[r % n]).collect();
    let augment = config.augment();
    let made = config.exec.map(&rows, |r, &vid| -> Result<(Vec<f32>, usize)> {
        let mut row_rng = StreamRng::derive(batch_key, &[r as u64]);
        let (clip, label, _) = random_clip(&corpus.videos[vid], &config.pace, config.clip_len, &mut row_rng)?;
        let clip = augment_clip(&clip, &augment, &mut row_rng)?;
        Ok((clip_to_input(&clip), label.0))
    });
    let mut data = Vec::new();
    let mut pace_labels = Vec::with_capacity(rows.len());
    for item in made {
        let (x, y) = item?;
        data.extend(x);
        pace_labels.push(y);
    }
    let c = corpus.videos[videos[0]].channels();
    let clips = Tensor::new(vec![rows.len(), c, config.clip_len, config.crop.0, config.crop.1], data)?;
    Ok(TrainBatch {
        clips,
        pace_labels,
        video_ids: rows,
    })
}

fn draw_distinct_train_videos(corpus: &Corpus, n: usize, rng: &mut StreamRng) -> Result<Vec<usize>> {
    let mut train = corpus.indices(Split::Train);
    if n > train.len() {
        return Err(Error::Argument(format!(
            "batch of {n} videos exceeds the {} training videos",
            train.len()
        )));
    }
    rng.shuffle(&mut train);
    train.truncate(n);
    Ok(train)
}

/// `N` distinct training videos, two independently paced and augmented clips each.
pub fn build_batch_same_context(corpus: &Corpus, config: &TrainConfig, rng: &mut StreamRng) -> Result<TrainBatch> {
    let videos = draw_distinct_train_videos(corpus, config.batch_videos, rng)?;
    let cfg = TrainConfig {
        contrastive: ContrastiveMode::SameContext,
        ..config.clone()
    };
    build_batch(corpus, &videos, &cfg, rng)
}

/// `N` distinct training videos, one clip each.
pub fn build_batch_same_pace(corpus: &Corpus, config: &TrainConfig, rng: &mut StreamRng) -> Result<TrainBatch> {
    let videos = draw_distinct_train_videos(corpus, config.batch_videos, rng)?;
    let cfg = TrainConfig {
        contrastive: ContrastiveMode::SamePace,
        ..config.clone()
    };
    build_batch(corpus, &videos, &cfg, rng)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub ctr: Option<f64>,
    /// The contrastive term was requested but the batch had no positive pair.
    pub ctr_skipped: bool,
}

/// Joint objective over network outputs: cross-entropy on the logits plus the
/// selected contrastive loss on the projections, each scaled by its weight.
/// A zero weight removes its term entirely.
pub fn batch_objective<S: Scalar>(
    out: &ForwardOutput<S>,
    pace_labels: &[usize],
    video_ids: &[usize],
    mode: ContrastiveMode,
    similarity: SimilarityMode,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Upstream<S>)> {
    let mut up = Upstream::default();
    let mut lb = LossBreakdown::default();
    let (cls, mut g) = cross_entropy(&out.logits, pace_labels)?;
    lb.cls = cls.as_f64();
    if weights.cls != 0.0 {
        lb.total += weights.cls * lb.cls;
        if weights.cls != 1.0 {
            g.scale(S::of(weights.cls));
        }
        up.logits = Some(g);
    }
    if weights.ctr != 0.0 && mode != ContrastiveMode::None {
        let batch = EmbeddingBatch::new(&out.projection, video_ids, pace_labels, similarity)?;
        let result = match mode {
            ContrastiveMode::SameContext => ctr_same_context(&batch),
            ContrastiveMode::SamePace => ctr_same_pace(&batch),
            ContrastiveMode::None => unreachable!(),
        };
        match result {
            Ok((ctr, mut g)) => {
                lb.ctr = Some(ctr.as_f64());
                lb.total += weights.ctr * ctr.as_f64();
                g.scale(S::of(weights.ctr));
                up.projection = Some(g);
            }
            Err(Error::DegenerateBatch(_)) => lb.ctr_skipped = true,
            Err(e) => return Err(e),
        }
    }
    Ok((lb, up))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub cls_loss: f64,
    pub ctr_loss: f64,
    pub pace_acc: f64,
    pub val_pace_acc: f64,
    pub lr: f64,
    pub ctr_skipped: usize,
}

pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fixed held-out pace clips: for test video `j`, clip `k` uses pace class
/// `(j + k) mod M` and a seeded start, center-cropped and not jittered.
pub fn validation_set(corpus: &Corpus, config: &TrainConfig) -> Result<(Vec<usize>, Vec<Vec<f32>>, Vec<usize>)> {
    let m = config.pace.num_classes();
    let mut specs = Vec::new();
    for (j, vid) in corpus.indices(Split::Test).into_iter().enumerate() {
        let mut rng = StreamRng::derive(config.seed, &[domain::VALIDATION, vid as u64]);
        for k in 0..config.val_clips_per_video {
            let label = (j + k) % m;
            let start = rng.below(corpus.videos[vid].frames());
            specs.push((vid, label, start));
        }
    }
    let inputs = config.exec.map(&specs, |_, &(vid, label, start)| -> Result<Vec<f32>> {
        let pace = config.pace.pace(PaceLabel(label));
        let clip = sample_clip(&corpus.videos[vid], pace, start, config.clip_len)?;
        Ok(clip_to_input(&center_crop(&clip, config.crop.0, config.crop.1)?))
    });
    let inputs = inputs.into_iter().collect::<Result<Vec<_>>>()?;
    let vids = specs.iter().map(|s| s.0).collect();
    let labels = specs.iter().map(|s| s.1).collect();
    Ok((vids, inputs, labels))
}

/// Runs `model` over flat inputs in chunks and returns logits rows.
pub fn predict_logits(model: &Model<f32>, inputs: &[Vec<f32>], chunk: usize) -> Result<Vec<Vec<f32>>> {
    let i = model.config().input;
    let mut rows = Vec::with_capacity(inputs.len());
    for part in inputs.chunks(chunk.max(1)) {
        let data: Vec<f32> = part.iter().flatten().copied().collect();
        let batch = Tensor::new(vec![part.len(), i.channels, i.frames, i.height, i.width], data)?;
        let out = model.infer(&batch)?;
        for r in 0..part.len() {
            rows.push(out.logits.row(r).to_vec());
        }
    }
    Ok(rows)
}

/// Pace accuracy of `model` on the fixed held-out clips.
pub fn evaluate_pace(model: &Model<f32>, corpus: &Corpus, config: &TrainConfig) -> Result<f64> {
    let (_, inputs, labels) = validation_set(corpus, config)?;
    pace_accuracy(model, &inputs, &labels)
}

fn pace_accuracy(model: &Model<f32>, inputs: &[Vec<f32>], labels: &[usize]) -> Result<f64> {
    if inputs.is_empty() {
        return Ok(0.0);
    }
    let logits = predict_logits(model, inputs, 32)?;
    let hits = logits.iter().zip(labels).filter(|(l, &y)| argmax(l) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Video order for one epoch: concatenated seeded shuffles of the training
/// split, cut into batches that never straddle two passes.
pub fn epoch_batches(corpus: &Corpus, config: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let train = corpus.indices(Split::Train);
    let target = config.epoch_size.unwrap_or(10 * train.len());
    let n = config.batch_videos.min(train.len());
    let num_batches = target.div_ceil(n.max(1));
    let mut batches = Vec::with_capacity(num_batches);
    let mut pass = 0u64;
    while batches.len() < num_batches {
        let mut order = train.clone();
        StreamRng::derive(config.seed, &[domain::TRAIN_ORDER, epoch as u64, pass]).shuffle(&mut order);
        for chunk in order.chunks(n) {
            if batches.len() == num_batches {
                break;
            }
            if chunk.len() >= 2 {
                batches.push(chunk.to_vec());
            }
        }
        pass += 1;
    }
    batches
}

pub struct PretrainResult {
    pub model: Model<f32>,
    pub metrics: Vec<EpochMetrics>,
}

/// Trains a fresh model. With `out_dir`, writes `metrics.jsonl`, one
/// `epoch_NNN.pck` per epoch and `final.pck`.
pub fn pretrain(corpus: &Corpus, config: &TrainConfig, out_dir: Option<&Path>) -> Result<PretrainResult> {
    let model = Model::new(config.model.clone(), derive_key(config.seed, &[domain::MODEL_INIT]))?;
    train_from(model, corpus, config, out_dir)
}

/// Continues training `model` (used by [`pretrain`] and for resuming).
pub fn train_from(
    mut model: Model<f32>,
    corpus: &Corpus,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainResult> {
    config.validate()?;
    if corpus.indices(Split::Train).len() < 2 {
        return Err(Error::Argument("need at least two training videos".into()));
    }
    model.set_exec(config.exec);
    let (_, val_inputs, val_labels) = validation_set(corpus, config)?;
    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };
    let mut opt = Sgd::new(config.momentum, config.weight_decay);
    let mut metrics = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_schedule(epoch, config);
        let (mut loss, mut cls, mut ctr) = (0.0, 0.0, 0.0);
        let (mut ctr_batches, mut skipped) = (0usize, 0usize);
        let (mut hits, mut seen) = (0usize, 0usize);
        let batches = epoch_batches(corpus, config, epoch);
        for (bi, videos) in batches.iter().enumerate() {
            let mut rng = StreamRng::derive(config.seed, &[domain::TRAIN_BATCH, epoch as u64, bi as u64]);
            let batch = build_batch(corpus, videos, config, &mut rng)?;
            let out = model.forward(&batch.clips)?;
            let (lb, upstream) = batch_objective(
                &out,
                &batch.pace_labels,
                &batch.video_ids,
                config.contrastive,
                config.similarity,
                &config.weights,
            )?;
            let grads = model.backward(&upstream)?;
            model.clear_cache();
            opt.step(&mut model.params, &grads, lr)?;
            loss += lb.total;
            cls += lb.cls;
            if let Some(c) = lb.ctr {
                ctr += c;
                ctr_batches += 1;
            }
            if lb.ctr_skipped {
                skipped += 1;
            }
            for (r, &y) in batch.pace_labels.iter().enumerate() {
                hits += (argmax(out.logits.row(r)) == y) as usize;
            }
            seen += batch.pace_labels.len();
        }
        if skipped > 0 {
            log::warn!("epoch {epoch}: contrastive term skipped on {skipped} degenerate batches");
        }
        let nb = batches.len().max(1) as f64;
        let m = EpochMetrics {
            epoch,
            loss: loss / nb,
            cls_loss: cls / nb,
            ctr_loss: if ctr_batches > 0 { ctr / ctr_batches as f64 } else { 0.0 },
            pace_acc: hits as f64 / seen.max(1) as f64,
            val_pace_acc: pace_accuracy(&model, &val_inputs, &val_labels)?,
            lr,
            ctr_skipped: skipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} cls {:.4} ctr {:.4} acc {:.3} val {:.3} lr {:e}",
            m.loss,
            m.cls_loss,
            m.ctr_loss,
            m.pace_acc,
            m.val_pace_acc,
            lr
        );
        if let (Some(f), Some(dir)) = (metrics_file.as_mut(), out_dir) {
            writeln!(f, "{}", serde_json::to_string(&m)?)?;
            save_checkpoint(&model, dir.join(format!("epoch_{epoch:03}.pck")))?;
        }
        metrics.push(m);
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&model, dir.join("final.pck"))?;
    }
    Ok(PretrainResult { model, metrics })
}

/// Convenience for callers that hold raw videos rather than a corpus.
pub fn single_clip_input(video: &VideoTensor, config: &TrainConfig, label: PaceLabel, start: usize) -> Result<Vec<f32>> {
    let clip = sample_clip(video, config.pace.pace(label), start, config.clip_len)?;
    Ok(clip_to_input(&center_crop(&clip, config.crop.0, config.crop.1)?))
}
