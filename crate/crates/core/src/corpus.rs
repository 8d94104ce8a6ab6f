//! Synthetic moving-shape videos and the `VPC1` on-disk video format.
//!
//! Each video shows one filled shape (square, disc or triangle; the shape is
//! the class label) translating at exactly `base_speed` pixels per frame over
//! a noisy background. Because the speed is fixed per corpus, the apparent
//! per-frame displacement of a sampled clip is `pace * base_speed`, which is
//! what makes the pace of a clip recoverable from its pixels.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rng::{domain, StreamRng};

pub const VIDEO_MAGIC: &[u8; 4] = b"VPC1";
const HEADER_LEN: usize = 4 + 4 * 4 + 1;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8,
    F32,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::F32 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PixelData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl PixelData {
    pub fn len(&self) -> usize {
        match self {
            PixelData::U8(v) => v.len(),
            PixelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            PixelData::U8(_) => DType::U8,
            PixelData::F32(_) => DType::F32,
        }
    }

    /// Value at a flat index, scaled to [0, 1].
    #[inline]
    pub fn value(&self, i: usize) -> f32 {
        match self {
            PixelData::U8(v) => v[i] as f32 / 255.0,
            PixelData::F32(v) => v[i],
        }
    }
}

/// A decoded video: `[T, H, W, C]`, frame-major, row-major, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: PixelData,
    pub fps: f32,
}

impl VideoTensor {
    pub fn new(
        frames: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: PixelData,
    ) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "video dims must be positive, got T={frames} H={height} W={width}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        let expected = frames * height * width * channels;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "data length {} does not match T*H*W*C = {expected}",
                data.len()
            )));
        }
        if let PixelData::F32(v) = &data {
            if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(Error::Argument(format!("f32 pixel {bad} outside [0, 1]")));
            }
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            data,
            fps: 25.0,
        })
    }

    pub fn zeros_f32(frames: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(
            frames,
            height,
            width,
            channels,
            PixelData::F32(vec![0.0; frames * height * width * channels]),
        )
    }

    pub fn frames(&self) -> usize {
        self.frames
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn dims(&self) -> [usize; 4] {
        [self.frames, self.height, self.width, self.channels]
    }
    pub fn data(&self) -> &PixelData {
        &self.data
    }
    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    /// Elements per frame (`H * W * C`).
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    #[inline]
    pub fn index(&self, t: usize, y: usize, x: usize, c: usize) -> usize {
        ((t * self.height + y) * self.width + x) * self.channels + c
    }

    /// Pixel value in [0, 1] regardless of storage dtype.
    #[inline]
    pub fn get(&self, t: usize, y: usize, x: usize, c: usize) -> f32 {
        self.data.value(self.index(t, y, x, c))
    }

    fn with_data(&self, frames: usize, data: PixelData) -> VideoTensor {
        VideoTensor {
            frames,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data,
            fps: self.fps,
        }
    }

    /// Converts to f32 storage (values in [0, 1]).
    pub fn to_f32(&self) -> VideoTensor {
        let data = match &self.data {
            PixelData::F32(v) => v.clone(),
            PixelData::U8(v) => v.iter().map(|&b| b as f32 / 255.0).collect(),
        };
        self.with_data(self.frames, PixelData::F32(data))
    }

    /// Mutable f32 storage; converts u8 storage in place first.
    pub fn f32_data_mut(&mut self) -> &mut [f32] {
        if let PixelData::U8(_) = self.data {
            *self = self.to_f32();
        }
        match &mut self.data {
            PixelData::F32(v) => v,
            PixelData::U8(_) => unreachable!(),
        }
    }

    /// Builds a new video from whole source frames (copied, never aliased).
    pub fn gather_frames(&self, indices: &[usize]) -> VideoTensor {
        let fl = self.frame_len();
        let data = match &self.data {
            PixelData::U8(v) => PixelData::U8(
                indices.iter().flat_map(|&t| v[t * fl..(t + 1) * fl].iter().copied()).collect(),
            ),
            PixelData::F32(v) => PixelData::F32(
                indices.iter().flat_map(|&t| v[t * fl..(t + 1) * fl].iter().copied()).collect(),
            ),
        };
        self.with_data(indices.len(), data)
    }
}

/// Serializes a video to the `VPC1` byte layout: magic, little-endian u32
/// `T, H, W, C`, a u8 dtype code, then the raw payload.
pub fn encode_video(video: &VideoTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + video.data.len() * 4);
    out.extend_from_slice(VIDEO_MAGIC);
    for d in [video.frames, video.height, video.width, video.channels] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(video.dtype().code());
    match &video.data {
        PixelData::U8(v) => out.extend_from_slice(v),
        PixelData::F32(v) => {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_video(bytes: &[u8]) -> Result<VideoTensor> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated magic"));
    }
    if &bytes[..4] != VIDEO_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 4 + 4 * i;
        let Some(raw) = bytes.get(off..off + 4) else {
            return Err(Error::format(bytes.len() as u64, "truncated header"));
        };
        *d = u32::from_le_bytes(raw.try_into().unwrap()) as usize;
        if *d == 0 {
            return Err(Error::format(off as u64, "zero dimension"));
        }
    }
    let [t, h, w, c] = dims;
    if c != 1 && c != 3 {
        return Err(Error::format(16, format!("channel count {c} not in {{1, 3}}")));
    }
    let Some(&code) = bytes.get(20) else {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    };
    let n = t
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::format(4, "dimensions overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    let width = match code {
        0 => 1,
        1 => 4,
        other => return Err(Error::format(20, format!("unknown dtype code {other}"))),
    };
    let needed = n
        .checked_mul(width)
        .ok_or_else(|| Error::format(4, "dimensions overflow"))?;
    if payload.len() < needed {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated payload: expected {needed} bytes, found {}", payload.len()),
        ));
    }
    if payload.len() > needed {
        return Err(Error::format(
            (HEADER_LEN + needed) as u64,
            "trailing bytes after payload",
        ));
    }
    let data = if code == 0 {
        PixelData::U8(payload.to_vec())
    } else {
        let mut v = Vec::with_capacity(n);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().unwrap());
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::format(
                    (HEADER_LEN + 4 * i) as u64,
                    format!("f32 pixel {x} outside [0, 1]"),
                ));
            }
            v.push(x);
        }
        PixelData::F32(v)
    };
    VideoTensor::new(t, h, w, c, data)
}

pub fn write_video(video: &VideoTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_video(video))?;
    Ok(())
}

pub fn read_video(path: impl AsRef<Path>) -> Result<VideoTensor> {
    decode_video(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub num_videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Displacement of the shape in pixels per frame.
    pub base_speed: f64,
    /// Largest pace the corpus will be sampled at; bounds `base_speed`.
    pub max_pace: f64,
    pub shape_classes: usize,
    /// Side of the square in pixels; every shape covers `shape_size^2` pixels.
    pub shape_size: f64,
    /// Uniform per-pixel noise half-width, as a fraction of the range.
    pub background_noise_amplitude: f64,
    /// Static shapes of random classes drawn behind the moving one.
    pub distractors: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            num_videos: 200,
            frames: 64,
            height: 40,
            width: 40,
            channels: 3,
            base_speed: 1.0,
            max_pace: 4.0,
            shape_classes: 3,
            shape_size: 12.0,
            background_noise_amplitude: 0.05,
            distractors: 0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("num_videos", self.num_videos),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::config("channels", "must be 1 or 3"));
        }
        if !(self.shape_classes >= 2 && self.shape_classes <= Shape::ALL.len()) {
            return Err(Error::config(
                "shape_classes",
                format!("must be in [2, {}]", Shape::ALL.len()),
            ));
        }
        if !(self.base_speed > 0.0) || !self.base_speed.is_finite() {
            return Err(Error::config("base_speed", "must be positive"));
        }
        if !(self.max_pace >= 1.0) {
            return Err(Error::config("max_pace", "must be at least 1"));
        }
        let min_side = self.height.min(self.width) as f64;
        if self.base_speed * self.max_pace >= min_side {
            return Err(Error::config(
                "base_speed",
                format!(
                    "base_speed * max_pace = {} must be below min(H, W) = {min_side}",
                    self.base_speed * self.max_pace
                ),
            ));
        }
        if !(self.shape_size >= 2.0) {
            return Err(Error::config("shape_size", "must be at least 2 pixels"));
        }
        // Free travel range per axis must allow a reflected step to stay inside.
        if min_side - 2.0 * Shape::half_extent(self.shape_size) - 2.0 < 2.0 * self.base_speed {
            return Err(Error::config(
                "shape_size",
                "shape too large for the canvas at this base_speed",
            ));
        }
        if !(0.0..=0.5).contains(&self.background_noise_amplitude) {
            return Err(Error::config("background_noise_amplitude", "must be in [0, 0.5]"));
        }
        if self.num_videos < 2 * self.shape_classes {
            return Err(Error::config(
                "num_videos",
                "need at least two videos per shape class so both splits see every class",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disc,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Disc, Shape::Triangle];

    /// Largest distance from the center to the shape boundary along either
    /// axis, over all shapes of area `size^2` (the triangle's).
    pub fn half_extent(size: f64) -> f64 {
        size / std::f64::consts::SQRT_2
    }

    /// Whether the point `(dy, dx)` relative to the shape center is inside.
    /// All shapes have area `size^2`, so foreground area carries no class
    /// information.
    fn contains(self, dy: f64, dx: f64, size: f64) -> bool {
        match self {
            Shape::Square => dy.abs() <= size / 2.0 && dx.abs() <= size / 2.0,
            Shape::Disc => {
                let r = size / std::f64::consts::PI.sqrt();
                dy * dy + dx * dx <= r * r
            }
            // Isosceles, apex up, base and height both `size * sqrt(2)`.
            Shape::Triangle => {
                let r = Self::half_extent(size);
                (-r..=r).contains(&dy) && dx.abs() <= (dy + r) / 2.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub videos: Vec<VideoTensor>,
    pub labels: Vec<usize>,
    pub split: Vec<Split>,
}

impl Corpus {
    pub fn new(videos: Vec<VideoTensor>, labels: Vec<usize>, split: Vec<Split>) -> Result<Self> {
        if videos.len() != labels.len() || videos.len() != split.len() {
            return Err(Error::Argument(format!(
                "corpus lengths disagree: {} videos, {} labels, {} split tags",
                videos.len(),
                labels.len(),
                split.len()
            )));
        }
        Ok(Self { videos, labels, split })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// Ground-truth motion parameters of one generated video.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Shape center `(y, x)` per frame.
    pub centers: Vec<(f64, f64)>,
}

struct StaticShape {
    shape: Shape,
    center: (f64, f64),
    color: [f64; 3],
}

struct VideoPlan {
    shape: Shape,
    trajectory: Trajectory,
    background: [f64; 3],
    foreground: [f64; 3],
    distractors: Vec<StaticShape>,
}

fn draw_color(spec: &CorpusSpec, rng: &mut StreamRng) -> [f64; 3] {
    if spec.channels == 3 {
        [rng.uniform_range(0.6, 1.0), rng.uniform_range(0.6, 1.0), rng.uniform_range(0.6, 1.0)]
    } else {
        [rng.uniform_range(0.6, 1.0); 3]
    }
}

fn plan_video(spec: &CorpusSpec, shape: Shape, rng: &mut StreamRng) -> VideoPlan {
    let margin = Shape::half_extent(spec.shape_size) + 1.0;
    let (lo_y, hi_y) = (margin, spec.height as f64 - margin);
    let (lo_x, hi_x) = (margin, spec.width as f64 - margin);
    let mut y = rng.uniform_range(lo_y, hi_y);
    let mut x = rng.uniform_range(lo_x, hi_x);
    let theta = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
    let mut vy = spec.base_speed * theta.sin();
    let mut vx = spec.base_speed * theta.cos();

    let bg = rng.uniform_range(0.05, 0.35);
    let mut background = [bg; 3];
    let mut foreground = [0.0; 3];
    if spec.channels == 3 {
        for c in 0..3 {
            background[c] = (bg + rng.uniform_range(-0.05, 0.05)).clamp(0.0, 1.0);
            foreground[c] = rng.uniform_range(0.6, 1.0);
        }
    } else {
        foreground = draw_color(spec, rng);
    }

    let mut centers = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        centers.push((y, x));
        // Reflect the velocity component before stepping, so every step has
        // length exactly base_speed and the shape stays on the canvas.
        if y + vy < lo_y || y + vy > hi_y {
            vy = -vy;
        }
        if x + vx < lo_x || x + vx > hi_x {
            vx = -vx;
        }
        y += vy;
        x += vx;
    }
    let distractors = (0..spec.distractors)
        .map(|_| StaticShape {
            shape: Shape::ALL[rng.below(spec.shape_classes)],
            center: (rng.uniform_range(lo_y, hi_y), rng.uniform_range(lo_x, hi_x)),
            color: draw_color(spec, rng),
        })
        .collect();
    VideoPlan {
        shape,
        trajectory: Trajectory { centers },
        background,
        foreground,
        distractors,
    }
}

/// Fraction of pixel `(yy, xx)` covered by `shape` centered at `(cy, cx)`,
/// from a `SUPERSAMPLE x SUPERSAMPLE` grid of sample points.
fn coverage(shape: Shape, size: f64, (cy, cx): (f64, f64), yy: usize, xx: usize) -> f64 {
    let ss = SUPERSAMPLE as f64;
    let reach = Shape::half_extent(size) + 1.0;
    // Pixel (yy, xx) covers [yy, yy+1) x [xx, xx+1).
    if (yy as f64 + 0.5 - cy).abs() > reach || (xx as f64 + 0.5 - cx).abs() > reach {
        return 0.0;
    }
    let mut hits = 0usize;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let dy = yy as f64 + (sy as f64 + 0.5) / ss - cy;
            let dx = xx as f64 + (sx as f64 + 0.5) / ss - cx;
            if shape.contains(dy, dx, size) {
                hits += 1;
            }
        }
    }
    hits as f64 / (ss * ss)
}

fn render_video(spec: &CorpusSpec, plan: &VideoPlan, rng: &mut StreamRng) -> VideoTensor {
    let (t_len, h, w, c) = (spec.frames, spec.height, spec.width, spec.channels);
    let mut data = vec![0u8; t_len * h * w * c];
    let amp = spec.background_noise_amplitude;
    // The static layer is the same in every frame.
    let mut still = vec![0.0f64; h * w * c];
    for yy in 0..h {
        for xx in 0..w {
            for ch in 0..c {
                still[(yy * w + xx) * c + ch] = plan.background[ch];
            }
            for d in &plan.distractors {
                let cov = coverage(d.shape, spec.shape_size, d.center, yy, xx);
                for ch in 0..c {
                    let v = &mut still[(yy * w + xx) * c + ch];
                    *v += cov * (d.color[ch] - *v);
                }
            }
        }
    }
    for (t, &center) in plan.trajectory.centers.iter().enumerate() {
        for yy in 0..h {
            for xx in 0..w {
                let cov = coverage(plan.shape, spec.shape_size, center, yy, xx);
                for ch in 0..c {
                    let under = still[(yy * w + xx) * c + ch];
                    let clean = under + cov * (plan.foreground[ch] - under);
                    let noisy = (clean + rng.uniform_range(-amp, amp)).clamp(0.0, 1.0);
                    data[((t * h + yy) * w + xx) * c + ch] = (noisy * 255.0).round() as u8;
                }
            }
        }
    }
    VideoTensor::new(t_len, h, w, c, PixelData::U8(data)).expect("generator dims validated")
}

/// Generates one video and its trajectory; a pure function of `(spec, index)`.
pub fn generate_video(spec: &CorpusSpec, index: usize) -> (VideoTensor, usize, Trajectory) {
    let label = index % spec.shape_classes;
    let mut rng = StreamRng::derive(spec.seed, &[domain::CORPUS_VIDEO, index as u64]);
    let plan = plan_video(spec, Shape::ALL[label], &mut rng);
    let video = render_video(spec, &plan, &mut rng);
    (video, label, plan.trajectory)
}

/// Stratified 80/20 split: each class's videos are shuffled with a seeded
/// stream and the first `max(1, round(0.2 n))` go to test.
fn split_labels(labels: &[usize], classes: usize, seed: u64) -> Vec<Split> {
    let mut split = vec![Split::Train; labels.len()];
    let mut rng = StreamRng::derive(seed, &[domain::CORPUS_SPLIT]);
    for class in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut members);
        let n_test = ((members.len() as f64 * 0.2).round() as usize)
            .max(1)
            .min(members.len() - 1);
        for &i in &members[..n_test] {
            split[i] = Split::Test;
        }
    }
    split
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    generate_corpus_with(spec, Exec::default())
}

pub fn generate_corpus_with(spec: &CorpusSpec, exec: Exec) -> Result<Corpus> {
    spec.validate()?;
    let generated = exec.map_range(spec.num_videos, |i| generate_video(spec, i));
    let mut videos = Vec::with_capacity(spec.num_videos);
    let mut labels = Vec::with_capacity(spec.num_videos);
    for (video, label, _) in generated {
        videos.push(video);
        labels.push(label);
    }
    let split = split_labels(&labels, spec.shape_classes, spec.seed);
    Corpus::new(videos, labels, split)
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes `videos/NNNNN.vpc` files plus a tab-separated manifest
/// (`<relative path>\t<class>\t<split>`, one line per video).
pub fn write_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("videos"))?;
    let mut manifest = Vec::new();
    for (i, video) in corpus.videos.iter().enumerate() {
        let rel = format!("videos/{i:05}.vpc");
        write_video(video, dir.join(&rel))?;
        writeln!(manifest, "{rel}\t{}\t{}", corpus.labels[i], corpus.split[i])?;
    }
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest)?;
    Ok(path)
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut videos = Vec::new();
    let mut labels = Vec::new();
    let mut split = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [rel, class, tag] = fields[..] else {
            return Err(Error::Argument(format!(
                "manifest line {}: expected 3 tab-separated fields",
                lineno + 1
            )));
        };
        videos.push(read_video(dir.join(rel))?);
        labels.push(class.parse::<usize>().map_err(|e| {
            Error::Argument(format!("manifest line {}: bad class: {e}", lineno + 1))
        })?);
        split.push(tag.parse()?);
    }
    Corpus::new(videos, labels, split)
}
