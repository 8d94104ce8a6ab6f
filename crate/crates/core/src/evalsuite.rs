//! Downstream evaluation of a trained backbone: 10-clip feature extraction,
//! cosine nearest-neighbour retrieval, linear probing and full fine-tuning
//! on the shape labels, and activation attention maps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_clip, center_crop, AugmentConfig, JitterParams};
use crate::corpus::{write_video, Corpus, PixelData, Split, VideoTensor};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::pacer::{sample_clip, Pace};
use crate::par::Exec;
use crate::rng::{derive_key, domain, StreamRng};
use crate::tensornet::checkpoint::load_checkpoint;
use crate::tensornet::{softmax, Model, ModelConfig, ProjectionHead, Sgd, Tensor, Upstream};
use crate::trainer::clip_to_input;

/// Clips per video in every evaluation path.
pub const CLIPS_PER_VIDEO: usize = 10;

pub const RETRIEVAL_KS: [usize; 5] = [1, 5, 10, 20, 50];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerTag {
    /// Pooled output of the last conv block.
    #[default]
    #[serde(rename = "p_last")]
    PLast,
    /// Pooled output of the second-to-last conv block.
    #[serde(rename = "p_penultimate")]
    PPenultimate,
}

impl LayerTag {
    fn block(self, num_blocks: usize) -> Result<usize> {
        match self {
            Self::PLast => Ok(num_blocks - 1),
            Self::PPenultimate if num_blocks >= 2 => Ok(num_blocks - 2),
            Self::PPenultimate => Err(Error::Argument(
                "p_penultimate needs a model with at least two blocks".into(),
            )),
        }
    }
}

impl fmt::Display for LayerTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PLast => "p_last",
            Self::PPenultimate => "p_penultimate",
        })
    }
}

impl FromStr for LayerTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p_last" => Ok(Self::PLast),
            "p_penultimate" => Ok(Self::PPenultimate),
            other => Err(Error::Argument(format!(
                "unknown layer tag `{other}` (expected p_last or p_penultimate)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeature {
    pub video_index: usize,
    pub label: usize,
    pub layer: LayerTag,
    /// One row per clip, `CLIPS_PER_VIDEO` rows.
    pub clips: Vec<Vec<f32>>,
    /// Mean of `clips`.
    pub pooled: Vec<f32>,
}

/// Start frames `floor(k T / 10)` for `k = 0..10`.
pub fn clip_starts(num_frames: usize) -> Vec<usize> {
    (0..CLIPS_PER_VIDEO)
        .map(|k| k * num_frames / CLIPS_PER_VIDEO)
        .collect()
}

/// The ten deterministic evaluation inputs of a video: uniform starts,
/// normal pace, center crop to the model input.
pub fn evaluation_inputs(model: &ModelConfig, video: &VideoTensor) -> Result<Tensor<f32>> {
    let i = model.input;
    if video.channels() != i.channels {
        return Err(Error::Shape(format!(
            "video has {} channels, model expects {}",
            video.channels(),
            i.channels
        )));
    }
    let mut data = Vec::with_capacity(CLIPS_PER_VIDEO * i.channels * i.frames * i.height * i.width);
    for start in clip_starts(video.frames()) {
        let clip = sample_clip(video, Pace::NORMAL, start, i.frames)?;
        data.extend(clip_to_input(&center_crop(&clip, i.height, i.width)?));
    }
    Tensor::new(vec![CLIPS_PER_VIDEO, i.channels, i.frames, i.height, i.width], data)
}

fn mean_rows(rows: &[Vec<f32>]) -> Vec<f32> {
    let mut acc = vec![0.0f64; rows[0].len()];
    for r in rows {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| (v / rows.len() as f64) as f32).collect()
}

/// Features of one corpus video at `layer`.
pub fn extract_features(model: &Model<f32>, corpus: &Corpus, video_index: usize, layer: LayerTag) -> Result<VideoFeature> {
    let video = corpus
        .videos
        .get(video_index)
        .ok_or_else(|| Error::Argument(format!("video {video_index} not in corpus")))?;
    let block = layer.block(model.config().blocks.len())?;
    let out = model.infer(&evaluation_inputs(model.config(), video)?)?;
    let feats = &out.block_features[block];
    let clips: Vec<Vec<f32>> = (0..CLIPS_PER_VIDEO).map(|r| feats.row(r).to_vec()).collect();
    Ok(VideoFeature {
        video_index,
        label: corpus.labels[video_index],
        layer,
        pooled: mean_rows(&clips),
        clips,
    })
}

/// Features for every video of `split`, in index order.
pub fn extract_split(model: &Model<f32>, corpus: &Corpus, split: Split, layer: LayerTag) -> Result<Vec<VideoFeature>> {
    corpus
        .indices(split)
        .into_iter()
        .map(|i| extract_features(model, corpus, i, layer))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// `k -> fraction of queries with a same-class neighbour in the top k`.
    pub topk: BTreeMap<usize, f64>,
    pub queries: usize,
    pub per_clip: bool,
}

impl RetrievalReport {
    pub fn to_json(&self) -> Result<String> {
        let topk: BTreeMap<String, f64> = self.topk.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        Ok(serde_json::to_string(&serde_json::json!({
            "topk": topk,
            "queries": self.queries,
            "per_clip": self.per_clip,
        }))?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,accuracy\n");
        for (k, v) in &self.topk {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }
}

fn normalized(v: &[f32]) -> Vec<f64> {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|&x| x as f64 / norm).collect()
}

/// Top-k retrieval of `queries` against `gallery` by cosine similarity.
/// Ties keep gallery order; `k` beyond the gallery size means the whole
/// gallery.
pub fn retrieve(
    gallery: &[Vec<f32>],
    gallery_labels: &[usize],
    queries: &[Vec<f32>],
    query_labels: &[usize],
    ks: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if gallery.is_empty() || queries.is_empty() {
        return Err(Error::Argument("retrieval needs a nonempty gallery and query set".into()));
    }
    if gallery.len() != gallery_labels.len() || queries.len() != query_labels.len() {
        return Err(Error::Argument("features and labels differ in length".into()));
    }
    let dim = gallery[0].len();
    if let Some(bad) = gallery.iter().chain(queries).find(|v| v.len() != dim) {
        return Err(Error::Shape(format!(
            "feature of dimension {} does not match dimension {dim}",
            bad.len()
        )));
    }
    let g: Vec<Vec<f64>> = gallery.iter().map(|v| normalized(v)).collect();
    let mut hits = vec![0usize; ks.len()];
    for (q, &ql) in queries.iter().zip(query_labels) {
        let q = normalized(q);
        let mut order: Vec<(f64, usize)> = g
            .iter()
            .enumerate()
            .map(|(i, v)| (v.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>(), i))
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let first_hit = order.iter().position(|&(_, i)| gallery_labels[i] == ql);
        for (h, &k) in hits.iter_mut().zip(ks) {
            if first_hit.is_some_and(|p| p < k) {
                *h += 1;
            }
        }
    }
    Ok(ks
        .iter()
        .zip(hits)
        .map(|(&k, h)| (k, h as f64 / queries.len() as f64))
        .collect())
}

/// Retrieval with pooled training features as the gallery. Queries are the
/// pooled test features, or every test clip feature with `per_clip`.
pub fn retrieve_topk(train: &[VideoFeature], test: &[VideoFeature], ks: &[usize], per_clip: bool) -> Result<RetrievalReport> {
    let gallery: Vec<Vec<f32>> = train.iter().map(|f| f.pooled.clone()).collect();
    let gallery_labels: Vec<usize> = train.iter().map(|f| f.label).collect();
    let (queries, labels): (Vec<Vec<f32>>, Vec<usize>) = if per_clip {
        test.iter()
            .flat_map(|f| f.clips.iter().map(move |c| (c.clone(), f.label)))
            .unzip()
    } else {
        test.iter().map(|f| (f.pooled.clone(), f.label)).unzip()
    };
    let topk = retrieve(&gallery, &gallery_labels, &queries, &labels, ks)?;
    Ok(RetrievalReport {
        topk,
        queries: queries.len(),
        per_clip,
    })
}

pub fn write_retrieval_report(report: &RetrievalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join("retrieval.json"), report.to_json()? + "\n")?;
    fs::write(dir.join("retrieval.csv"), report.to_csv())?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Multinomial logistic regression on frozen pooled features.
    Linear,
    /// Every parameter trained, fully connected layers re-initialized.
    Full,
}

impl FromStr for ProbeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "full" => Ok(Self::Full),
            other => Err(Error::config("eval.mode", format!("`{other}` is not linear or full"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub mode: ProbeMode,
    pub layer: LayerTag,
    /// Logistic regression: full-batch gradient steps, step size and L2.
    pub linear_steps: usize,
    pub linear_lr: f64,
    pub linear_l2: f64,
    /// Fine-tuning schedule.
    pub epochs: usize,
    pub batch_videos: usize,
    pub lr: f64,
    pub momentum: f64,
    pub flip_probability: f64,
    pub jitter: Option<JitterParams>,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            mode: ProbeMode::Linear,
            layer: LayerTag::PLast,
            linear_steps: 500,
            linear_lr: 0.5,
            linear_l2: 1e-3,
            epochs: 10,
            batch_videos: 16,
            lr: 1e-2,
            momentum: 0.9,
            flip_probability: 0.5,
            jitter: Some(JitterParams::default()),
            seed: 0,
            exec: Exec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub test_videos: usize,
}

/// A linear softmax classifier on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[classes, dim]` row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
}

impl LinearProbe {
    /// Full-batch gradient descent on the mean cross-entropy plus
    /// `l2 / 2 * ||W||^2`, from zero weights.
    pub fn fit(x: &[Vec<f32>], y: &[usize], classes: usize, steps: usize, lr: f64, l2: f64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::Argument("probe needs matching, nonempty features and labels".into()));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= classes) {
            return Err(Error::Argument(format!("label {bad} out of range for {classes} classes")));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64 / n;
            }
        }
        let mut scale = vec![0.0; d];
        for row in x {
            for ((s, &v), m) in scale.iter_mut().zip(row).zip(&mean) {
                *s += (v as f64 - m).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = 1.0 / s.sqrt().max(1e-6);
        }
        let mut probe = Self {
            mean,
            scale,
            weight: vec![0.0; classes * d],
            bias: vec![0.0; classes],
            classes,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| probe.standardize(r)).collect();
        for _ in 0..steps {
            let mut gw = vec![0.0; classes * d];
            let mut gb = vec![0.0; classes];
            for (row, &label) in z.iter().zip(y) {
                let mut p = probe.logits_std(row);
                softmax_in_place(&mut p);
                p[label] -= 1.0;
                for c in 0..classes {
                    gb[c] += p[c] / n;
                    for (g, &v) in gw[c * d..(c + 1) * d].iter_mut().zip(row) {
                        *g += p[c] * v / n;
                    }
                }
            }
            for (w, g) in probe.weight.iter_mut().zip(&gw) {
                *w -= lr * (g + l2 * *w);
            }
            for (b, g) in probe.bias.iter_mut().zip(&gb) {
                *b -= lr * g;
            }
        }
        Ok(probe)
    }

    fn standardize(&self, row: &[f32]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((&v, m), s)| (v as f64 - m) * s)
            .collect()
    }

    fn logits_std(&self, z: &[f64]) -> Vec<f64> {
        let d = z.len();
        (0..self.classes)
            .map(|c| self.bias[c] + self.weight[c * d..(c + 1) * d].iter().zip(z).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn probabilities(&self, row: &[f32]) -> Vec<f64> {
        let mut p = self.logits_std(&self.standardize(row));
        softmax_in_place(&mut p);
        p
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn argmax64(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Video-level prediction: argmax of the softmax averaged over its clips.
fn video_prediction(clip_probs: &[Vec<f64>]) -> usize {
    let mut avg = vec![0.0; clip_probs[0].len()];
    for p in clip_probs {
        for (a, v) in avg.iter_mut().zip(p) {
            *a += v;
        }
    }
    argmax64(&avg)
}

/// Evaluates shape classification on top of `pretrained`'s conv blocks.
/// The fully connected layers are always re-initialized; `pretrained`
/// itself is never modified.
pub fn finetune_probe(pretrained: &Model<f32>, corpus: &Corpus, config: &ProbeConfig) -> Result<ProbeReport> {
    match config.mode {
        ProbeMode::Linear => linear_probe(pretrained, corpus, config),
        ProbeMode::Full => full_finetune(pretrained, corpus, config).map(|(report, _)| report),
    }
}

/// [`finetune_probe`] from a checkpoint written for `model_config`.
pub fn finetune_probe_checkpoint(
    path: impl AsRef<Path>,
    model_config: &ModelConfig,
    corpus: &Corpus,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    let model = load_checkpoint(path, model_config)?.with_exec(config.exec);
    finetune_probe(&model, corpus, config)
}

fn linear_probe(model: &Model<f32>, corpus: &Corpus, config: &ProbeConfig) -> Result<ProbeReport> {
    let train = extract_split(model, corpus, Split::Train, config.layer)?;
    let test = extract_split(model, corpus, Split::Test, config.layer)?;
    if train.is_empty() || test.is_empty() {
        return Err(Error::Argument("probe needs nonempty train and test splits".into()));
    }
    let classes = corpus.num_classes();
    let (x, y): (Vec<Vec<f32>>, Vec<usize>) = train
        .iter()
        .flat_map(|f| f.clips.iter().map(move |c| (c.clone(), f.label)))
        .unzip();
    let probe = LinearProbe::fit(&x, &y, classes, config.linear_steps, config.linear_lr, config.linear_l2)?;
    let accuracy = |set: &[VideoFeature]| {
        let hits = set
            .iter()
            .filter(|f| {
                let probs: Vec<Vec<f64>> = f.clips.iter().map(|c| probe.probabilities(c)).collect();
                video_prediction(&probs) == f.label
            })
            .count();
        hits as f64 / set.len() as f64
    };
    Ok(ProbeReport {
        mode: ProbeMode::Linear,
        train_accuracy: accuracy(&train),
        test_accuracy: accuracy(&test),
        test_videos: test.len(),
    })
}

/// A classifier for `classes` labels with `pretrained`'s conv weights and
/// freshly initialized fully connected layers.
pub fn downstream_model(pretrained: &Model<f32>, classes: usize, seed: u64) -> Result<Model<f32>> {
    let config = ModelConfig {
        projection_head: ProjectionHead::None,
        ..pretrained.config().with_classes(classes)
    };
    let mut model = Model::new(config, derive_key(seed, &[domain::PROBE]))?;
    for name in pretrained.backbone_names() {
        let src = pretrained.params.get(&name).expect("backbone name");
        *model
            .params
            .get_mut(&name)
            .ok_or_else(|| Error::Checkpoint(format!("downstream model lacks `{name}`")))? = src.clone();
    }
    Ok(model)
}

/// Video-level accuracy of a classifier model under the 10-clip protocol.
pub fn video_accuracy(model: &Model<f32>, corpus: &Corpus, split: Split) -> Result<f64> {
    let videos = corpus.indices(split);
    if videos.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0;
    for &v in &videos {
        let out = model.infer(&evaluation_inputs(model.config(), &corpus.videos[v])?)?;
        let probs = softmax(&out.logits.cast::<f64>());
        let rows: Vec<Vec<f64>> = (0..CLIPS_PER_VIDEO).map(|r| probs.row(r).to_vec()).collect();
        hits += (video_prediction(&rows) == corpus.labels[v]) as usize;
    }
    Ok(hits as f64 / videos.len() as f64)
}

/// End-to-end fine-tuning on shape labels; returns the report and the
/// trained classifier.
pub fn full_finetune(pretrained: &Model<f32>, corpus: &Corpus, config: &ProbeConfig) -> Result<(ProbeReport, Model<f32>)> {
    let classes = corpus.num_classes();
    let mut model = downstream_model(pretrained, classes, config.seed)?.with_exec(config.exec);
    let input = model.config().input;
    let augment = AugmentConfig {
        crop: (input.height, input.width),
        flip_probability: config.flip_probability,
        jitter: config.jitter,
    };
    let train = corpus.indices(Split::Train);
    if train.is_empty() {
        return Err(Error::Argument("fine-tuning needs training videos".into()));
    }
    let mut opt = Sgd::new(config.momentum, 0.0);
    for epoch in 0..config.epochs {
        let mut order = train.clone();
        StreamRng::derive(config.seed, &[domain::PROBE, 1, epoch as u64]).shuffle(&mut order);
        for (bi, videos) in order.chunks(config.batch_videos.max(1)).enumerate() {
            let key = derive_key(config.seed, &[domain::PROBE, 2, epoch as u64, bi as u64]);
            let made = config.exec.map(videos, |r, &v| -> Result<Vec<f32>> {
                let mut rng = StreamRng::derive(key, &[r as u64]);
                let video = &corpus.videos[v];
                let start = rng.below(video.frames());
                let clip = sample_clip(video, Pace::NORMAL, start, input.frames)?;
                Ok(clip_to_input(&augment_clip(&clip, &augment, &mut rng)?))
            });
            let mut data = Vec::new();
            for m in made {
                data.extend(m?);
            }
            let batch = Tensor::new(vec![videos.len(), input.channels, input.frames, input.height, input.width], data)?;
            let labels: Vec<usize> = videos.iter().map(|&v| corpus.labels[v]).collect();
            let out = model.forward(&batch)?;
            let (_, g) = cross_entropy(&out.logits, &labels)?;
            let grads = model.backward(&Upstream {
                logits: Some(g),
                ..Default::default()
            })?;
            model.clear_cache();
            opt.step(&mut model.params, &grads, config.lr)?;
        }
    }
    let report = ProbeReport {
        mode: ProbeMode::Full,
        train_accuracy: video_accuracy(&model, corpus, Split::Train)?,
        test_accuracy: video_accuracy(&model, corpus, Split::Test)?,
        test_videos: corpus.indices(Split::Test).len(),
    };
    Ok((report, model))
}

/// Channel-mean absolute activation of a `[C, T, H, W]` tensor,
/// normalized to sum to 1 (uniform when all activations vanish).
pub fn attention_map(activation: &Tensor<f32>) -> Result<Tensor<f32>> {
    if activation.rank() != 4 {
        return Err(Error::Shape(format!(
            "attention map needs a [C, T, H, W] activation, got {:?}",
            activation.dims()
        )));
    }
    let d = activation.dims();
    let plane = d[1] * d[2] * d[3];
    let mut map = vec![0.0f64; plane];
    for ch in activation.data().chunks_exact(plane) {
        for (m, &v) in map.iter_mut().zip(ch) {
            *m += (v as f64).abs();
        }
    }
    let total: f64 = map.iter().sum();
    let data: Vec<f32> = if total > 0.0 {
        map.iter().map(|&v| (v / total) as f32).collect()
    } else {
        vec![1.0 / plane as f32; plane]
    };
    Tensor::new(vec![d[1], d[2], d[3]], data)
}

/// Attention of `block` for one network input `[C, L, h, w]`.
pub fn clip_attention(model: &Model<f32>, input: &[f32], block: usize) -> Result<Tensor<f32>> {
    let i = model.config().input;
    let batch = Tensor::new(vec![1, i.channels, i.frames, i.height, i.width], input.to_vec())?;
    let mut local = model.clone();
    local.forward(&batch)?;
    attention_map(&local.cached_activation(0, block)?)
}

/// A `[T, H, W]` map as a single-channel f32 video.
pub fn attention_video(map: &Tensor<f32>) -> Result<VideoTensor> {
    let d = map.dims();
    VideoTensor::new(d[0], d[1], d[2], 1, PixelData::F32(map.data().to_vec()))
}

pub fn write_attention(map: &Tensor<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_video(&attention_video(map)?, path)
}
