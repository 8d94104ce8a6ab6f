//! The tiny video CNN: a stack of conv blocks, global average pooling, an
//! embedding layer, a pace classifier and an optional projection head.
//!
//! Forward and backward run per sample so that a batch can be spread over
//! worker threads; gradients are reduced afterwards in sample order, which
//! keeps results independent of the thread count.

use std::fmt::Write as _;
use std::hash::{DefaultHasher, Hash, Hasher};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::rng::{domain, StreamRng};

use super::conv::{conv_backward_sample, conv_forward_sample, ConvGeom};
use super::params::ParamSet;
use super::pool::{
    global_avg_pool, global_avg_pool_backward, max_pool_backward, max_pool_forward, pooled_dims,
};
use super::scalar::{gemm, MatRef, Scalar};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Conv3d,
    /// Spatial `1 x kh x kw` conv, ReLU, then temporal `kt x 1 x 1` conv.
    Conv2Plus1d,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    None,
    /// Max pool over `(1, 2, 2)`.
    Spatial,
    /// Max pool over `(2, 2, 2)`.
    Full,
}

impl PoolKind {
    pub fn kernel(self) -> Option<[usize; 3]> {
        match self {
            PoolKind::None => None,
            PoolKind::Spatial => Some([1, 2, 2]),
            PoolKind::Full => Some([2, 2, 2]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockConfig {
    pub kind: ConvKind,
    pub out_channels: usize,
    /// Width of the (2+1)D intermediate; defaults to the parameter-matched
    /// count `floor(kt*kh*kw*C*K / (kh*kw*C + kt*K))`.
    pub mid_channels: Option<usize>,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub pool: PoolKind,
    /// ReLU between the (2+1)D factors.
    pub inner_relu: bool,
}

impl BlockConfig {
    pub fn conv3d(out_channels: usize, pool: PoolKind) -> Self {
        Self {
            kind: ConvKind::Conv3d,
            out_channels,
            mid_channels: None,
            kernel: [3, 3, 3],
            stride: [1, 1, 1],
            padding: [1, 1, 1],
            pool,
            inner_relu: true,
        }
    }

    pub fn conv2plus1d(out_channels: usize, pool: PoolKind) -> Self {
        Self {
            kind: ConvKind::Conv2Plus1d,
            ..Self::conv3d(out_channels, pool)
        }
    }

    fn mid(&self, in_channels: usize) -> usize {
        self.mid_channels.unwrap_or_else(|| {
            let [kt, kh, kw] = self.kernel;
            let num = kt * kh * kw * in_channels * self.out_channels;
            let den = kh * kw * in_channels + kt * self.out_channels;
            (num / den).max(1)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionHead {
    None,
    /// `fc -> ReLU -> fc` back to the embedding width.
    Mlp { hidden: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputShape {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input: InputShape,
    pub blocks: Vec<BlockConfig>,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub projection_head: ProjectionHead,
}

impl ModelConfig {
    /// Three 3x3x3 blocks with 8, 16, 32 channels pooled by (1,2,2),
    /// (2,2,2), (2,2,2), and a 64-wide embedding.
    pub fn tiny(input: InputShape, num_classes: usize) -> Self {
        Self {
            input,
            blocks: vec![
                BlockConfig::conv3d(8, PoolKind::Spatial),
                BlockConfig::conv3d(16, PoolKind::Full),
                BlockConfig::conv3d(32, PoolKind::Full),
            ],
            embed_dim: 64,
            num_classes,
            projection_head: ProjectionHead::None,
        }
    }

    pub fn with_kind(mut self, kind: ConvKind) -> Self {
        for b in &mut self.blocks {
            b.kind = kind;
        }
        self
    }

    /// Stable textual form hashed into checkpoints.
    pub fn canonical(&self) -> String {
        let i = &self.input;
        let mut s = format!("in={}x{}x{}x{}", i.channels, i.frames, i.height, i.width);
        for (n, b) in self.blocks.iter().enumerate() {
            let kind = match b.kind {
                ConvKind::Conv3d => "conv3d",
                ConvKind::Conv2Plus1d => "conv2plus1d",
            };
            let pool = match b.pool {
                PoolKind::None => "none",
                PoolKind::Spatial => "1x2x2",
                PoolKind::Full => "2x2x2",
            };
            let mid = b.mid_channels.map_or("-".to_string(), |m| m.to_string());
            let j = |a: [usize; 3]| format!("{}x{}x{}", a[0], a[1], a[2]);
            let _ = write!(
                s,
                ";b{n}={kind},{},mid={mid},k={},s={},p={},pool={pool},relu={}",
                b.out_channels,
                j(b.kernel),
                j(b.stride),
                j(b.padding),
                b.inner_relu as u8
            );
        }
        let head = match self.projection_head {
            ProjectionHead::None => "none".to_string(),
            ProjectionHead::Mlp { hidden } => format!("mlp{hidden}"),
        };
        let _ = write!(s, ";embed={};classes={};head={head}", self.embed_dim, self.num_classes);
        s
    }

    /// 32-bit FNV-1a of [`ModelConfig::canonical`].
    pub fn hash(&self) -> u32 {
        self.canonical().bytes().fold(0x811C_9DC5u32, |h, b| {
            (h ^ b as u32).wrapping_mul(0x0100_0193)
        })
    }

    /// Same architecture with a different classifier width.
    pub fn with_classes(&self, num_classes: usize) -> Self {
        Self {
            num_classes,
            ..self.clone()
        }
    }

    pub fn layout(&self) -> Result<Layout> {
        Layout::new(self)
    }
}

#[derive(Clone, Debug)]
pub struct BlockLayout {
    pub kind: ConvKind,
    /// The 3D conv, or the spatial factor of a (2+1)D block.
    pub first: ConvGeom,
    /// Temporal factor of a (2+1)D block.
    pub second: Option<ConvGeom>,
    pub inner_relu: bool,
    /// `[C, T, H, W]` after the conv(s) and ReLU, before pooling.
    pub act_dims: [usize; 4],
    pub pool: Option<[usize; 3]>,
    /// `[C, T, H, W]` after pooling.
    pub out_dims: [usize; 4],
    /// Index of this block's first parameter tensor.
    pub param_index: usize,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub blocks: Vec<BlockLayout>,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub projection: Option<usize>,
    pub embed_index: usize,
    pub classifier_index: usize,
    pub head_index: Option<usize>,
    pub input_len: usize,
    names: Vec<(String, Vec<usize>, usize)>,
}

impl Layout {
    fn new(config: &ModelConfig) -> Result<Self> {
        let i = config.input;
        if i.channels == 0 || i.frames == 0 || i.height == 0 || i.width == 0 {
            return Err(Error::config("model.input", "input dims must be positive"));
        }
        if config.blocks.is_empty() {
            return Err(Error::config("model.blocks", "need at least one block"));
        }
        if config.embed_dim == 0 {
            return Err(Error::config("model.embed_dim", "must be positive"));
        }
        if config.num_classes < 2 {
            return Err(Error::config("model.num_classes", "need at least two classes"));
        }
        // (name, dims, fan_in) per parameter tensor; fan_in 0 marks a bias.
        let mut names: Vec<(String, Vec<usize>, usize)> = Vec::new();
        let mut blocks = Vec::with_capacity(config.blocks.len());
        let mut c = i.channels;
        let mut dims = [i.frames, i.height, i.width];
        for (n, b) in config.blocks.iter().enumerate() {
            let param_index = names.len();
            let shape_err = |e: Error| Error::config(format!("model.block{n}"), e.to_string());
            let (first, second) = match b.kind {
                ConvKind::Conv3d => {
                    let g = ConvGeom::new(c, dims, b.out_channels, b.kernel, b.stride, b.padding)
                        .map_err(shape_err)?;
                    names.push((format!("block{n}.weight"), g.weight_dims().to_vec(), g.patch_len()));
                    names.push((format!("block{n}.bias"), vec![b.out_channels], 0));
                    (g, None)
                }
                ConvKind::Conv2Plus1d => {
                    let mid = b.mid(c);
                    let gs = ConvGeom::new(
                        c,
                        dims,
                        mid,
                        [1, b.kernel[1], b.kernel[2]],
                        [1, b.stride[1], b.stride[2]],
                        [0, b.padding[1], b.padding[2]],
                    )
                    .map_err(shape_err)?;
                    let gt = ConvGeom::new(
                        mid,
                        gs.out_dims,
                        b.out_channels,
                        [b.kernel[0], 1, 1],
                        [b.stride[0], 1, 1],
                        [b.padding[0], 0, 0],
                    )
                    .map_err(shape_err)?;
                    names.push((format!("block{n}.spatial.weight"), gs.weight_dims().to_vec(), gs.patch_len()));
                    names.push((format!("block{n}.spatial.bias"), vec![mid], 0));
                    names.push((format!("block{n}.temporal.weight"), gt.weight_dims().to_vec(), gt.patch_len()));
                    names.push((format!("block{n}.temporal.bias"), vec![b.out_channels], 0));
                    (gs, Some(gt))
                }
            };
            let conv_out = second.as_ref().unwrap_or(&first).out_dims;
            let act_dims = [b.out_channels, conv_out[0], conv_out[1], conv_out[2]];
            let pool = b.pool.kernel();
            let pooled = pool.map_or(conv_out, |k| pooled_dims(conv_out, k));
            if pooled.contains(&0) {
                return Err(Error::config(
                    format!("model.block{n}"),
                    format!("pooling {conv_out:?} by {pool:?} leaves an empty map"),
                ));
            }
            blocks.push(BlockLayout {
                kind: b.kind,
                first,
                second,
                inner_relu: b.inner_relu,
                act_dims,
                pool,
                out_dims: [b.out_channels, pooled[0], pooled[1], pooled[2]],
                param_index,
            });
            c = b.out_channels;
            dims = pooled;
        }
        let feature_dim = c;
        let d = config.embed_dim;
        let embed_index = names.len();
        names.push(("embed.weight".into(), vec![d, feature_dim], feature_dim));
        names.push(("embed.bias".into(), vec![d], 0));
        let classifier_index = names.len();
        names.push(("classifier.weight".into(), vec![config.num_classes, d], d));
        names.push(("classifier.bias".into(), vec![config.num_classes], 0));
        let (head_index, projection) = match config.projection_head {
            ProjectionHead::None => (None, None),
            ProjectionHead::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::config("model.head_hidden", "must be positive"));
                }
                let idx = names.len();
                names.push(("head.fc1.weight".into(), vec![hidden, d], d));
                names.push(("head.fc1.bias".into(), vec![hidden], 0));
                names.push(("head.fc2.weight".into(), vec![d, hidden], hidden));
                names.push(("head.fc2.bias".into(), vec![d], 0));
                (Some(idx), Some(hidden))
            }
        };
        Ok(Self {
            blocks,
            feature_dim,
            embed_dim: d,
            num_classes: config.num_classes,
            projection,
            embed_index,
            classifier_index,
            head_index,
            input_len: i.channels * i.frames * i.height * i.width,
            names,
        })
    }

    pub fn projection_dim(&self) -> usize {
        self.embed_dim
    }

    /// Empty (zero) parameter set with this layout's names and shapes.
    pub fn zeros<S: Scalar>(&self) -> ParamSet<S> {
        ParamSet::new(
            self.names
                .iter()
                .map(|(n, d, _)| (n.clone(), Tensor::zeros(d)))
                .collect(),
        )
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases, drawn
    /// in parameter order from one seeded stream.
    pub fn init<S: Scalar>(&self, seed: u64) -> ParamSet<S> {
        let mut rng = StreamRng::derive(seed, &[domain::MODEL_INIT]);
        ParamSet::new(
            self.names
                .iter()
                .map(|(n, d, fan_in)| {
                    let t = if *fan_in == 0 {
                        Tensor::zeros(d)
                    } else {
                        let std = (2.0 / *fan_in as f64).sqrt();
                        Tensor::from_fn(d, |_| S::of(std * rng.normal()))
                    };
                    (n.clone(), t)
                })
                .collect(),
        )
    }
}

/// Per-sample activations retained for backward.
#[derive(Clone, Debug)]
struct BlockCache<S> {
    /// Output of the spatial factor (after the inner ReLU if enabled).
    mid: Option<Vec<S>>,
    /// Post-ReLU conv output, before pooling.
    act: Vec<S>,
    argmax: Option<Vec<u32>>,
    out: Vec<S>,
}

#[derive(Clone, Debug)]
struct SampleCache<S> {
    input: Vec<S>,
    blocks: Vec<BlockCache<S>>,
    pooled: Vec<S>,
    embedding: Vec<S>,
    hidden: Option<Vec<S>>,
}

#[derive(Clone, Debug)]
struct SampleOut<S> {
    logits: Vec<S>,
    embedding: Vec<S>,
    projection: Vec<S>,
    block_features: Vec<Vec<S>>,
}

/// Batched network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<S> {
    /// `[N, M]` pre-softmax pace scores.
    pub logits: Tensor<S>,
    /// `[N, D]`.
    pub embedding: Tensor<S>,
    /// `[N, D]`; equals `embedding` without a projection head.
    pub projection: Tensor<S>,
    /// Per block, the globally average-pooled block output `[N, C_b]`.
    pub block_features: Vec<Tensor<S>>,
}

/// Loss gradients flowing into the network outputs (any subset).
#[derive(Clone, Debug, Default)]
pub struct Upstream<S> {
    pub logits: Option<Tensor<S>>,
    pub embedding: Option<Tensor<S>>,
    pub projection: Option<Tensor<S>>,
}

#[inline]
fn relu_in_place<S: Scalar>(v: &mut [S]) {
    for x in v {
        if *x < S::zero() {
            *x = S::zero();
        }
    }
}

#[inline]
fn relu_mask<S: Scalar>(grad: &mut [S], act: &[S]) {
    for (g, &a) in grad.iter_mut().zip(act) {
        if a <= S::zero() {
            *g = S::zero();
        }
    }
}

/// `y = W x + b` for a row-major `[out, in]` weight.
fn linear<S: Scalar>(w: &Tensor<S>, b: &Tensor<S>, x: &[S]) -> Vec<S> {
    let (rows, cols) = (w.dims()[0], w.dims()[1]);
    let mut y = b.data().to_vec();
    gemm(MatRef::new(w.data(), rows, cols), MatRef::new(x, cols, 1), S::one(), &mut y);
    y
}

/// Accumulates `dW += g x^T`, `db += g` and returns `W^T g`.
fn linear_backward<S: Scalar>(
    w: &Tensor<S>,
    x: &[S],
    g: &[S],
    gw: &mut Tensor<S>,
    gb: &mut Tensor<S>,
) -> Vec<S> {
    let (rows, cols) = (w.dims()[0], w.dims()[1]);
    gemm(MatRef::new(g, rows, 1), MatRef::new(x, 1, cols), S::one(), gw.data_mut());
    for (b, &v) in gb.data_mut().iter_mut().zip(g) {
        *b += v;
    }
    let mut gx = vec![S::zero(); cols];
    gemm(MatRef::new(w.data(), rows, cols).t(), MatRef::new(g, rows, 1), S::zero(), &mut gx);
    gx
}

#[derive(Clone, Debug)]
pub struct Model<S> {
    config: ModelConfig,
    layout: Layout,
    pub params: ParamSet<S>,
    cache: Option<Vec<SampleCache<S>>>,
    exec: Exec,
}

impl<S: Scalar> Model<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let layout = config.layout()?;
        let params = layout.init(seed);
        Ok(Self {
            config,
            layout,
            params,
            cache: None,
            exec: Exec::default(),
        })
    }

    pub fn from_params(config: ModelConfig, params: ParamSet<S>) -> Result<Self> {
        let layout = config.layout()?;
        layout.zeros::<S>().check_same_shapes(&params)?;
        Ok(Self {
            config,
            layout,
            params,
            cache: None,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn set_exec(&mut self, exec: Exec) {
        self.exec = exec;
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Same weights in another precision (the cache is dropped).
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            cache: None,
            exec: self.exec,
        }
    }

    fn check_batch(&self, batch: &Tensor<S>) -> Result<usize> {
        let i = self.config.input;
        let want = [i.channels, i.frames, i.height, i.width];
        let d = batch.dims();
        if d.len() != 5 || d[1..] != want || d[0] == 0 {
            return Err(Error::Shape(format!(
                "batch {d:?} does not match model input [N, {}, {}, {}, {}]",
                want[0], want[1], want[2], want[3]
            )));
        }
        Ok(d[0])
    }

    fn forward_sample(&self, x: &[S], keep: bool) -> (SampleOut<S>, Option<SampleCache<S>>) {
        let p = &self.params;
        let mut scratch = Vec::new();
        let mut blocks: Vec<BlockCache<S>> = Vec::with_capacity(self.layout.blocks.len());
        let mut block_features = Vec::with_capacity(self.layout.blocks.len());
        for (bi, bl) in self.layout.blocks.iter().enumerate() {
            let input: &[S] = if bi == 0 { x } else { &blocks[bi - 1].out };
            let pi = bl.param_index;
            let (mid, mut act) = match &bl.second {
                None => {
                    let mut out = vec![S::zero(); bl.first.out_len()];
                    conv_forward_sample(&bl.first, input, p.at(pi).data(), p.at(pi + 1).data(), &mut out, &mut scratch);
                    (None, out)
                }
                Some(gt) => {
                    let mut mid = vec![S::zero(); bl.first.out_len()];
                    conv_forward_sample(&bl.first, input, p.at(pi).data(), p.at(pi + 1).data(), &mut mid, &mut scratch);
                    if bl.inner_relu {
                        relu_in_place(&mut mid);
                    }
                    let mut out = vec![S::zero(); gt.out_len()];
                    conv_forward_sample(gt, &mid, p.at(pi + 2).data(), p.at(pi + 3).data(), &mut out, &mut scratch);
                    (Some(mid), out)
                }
            };
            relu_in_place(&mut act);
            let (out, argmax) = match bl.pool {
                Some(k) => {
                    let [c, t, h, w] = bl.act_dims;
                    let (o, idx) = max_pool_forward(&act, c, [t, h, w], k);
                    (o, Some(idx))
                }
                None => (act.clone(), None),
            };
            block_features.push(global_avg_pool(&out, bl.out_dims[0]));
            blocks.push(BlockCache { mid, act, argmax, out });
        }
        let pooled = block_features.last().cloned().expect("at least one block");
        let mut embedding = linear(p.at(self.layout.embed_index), p.at(self.layout.embed_index + 1), &pooled);
        relu_in_place(&mut embedding);
        let ci = self.layout.classifier_index;
        let logits = linear(p.at(ci), p.at(ci + 1), &embedding);
        let (projection, hidden) = match self.layout.head_index {
            None => (embedding.clone(), None),
            Some(hi) => {
                let mut h = linear(p.at(hi), p.at(hi + 1), &embedding);
                relu_in_place(&mut h);
                (linear(p.at(hi + 2), p.at(hi + 3), &h), Some(h))
            }
        };
        let out = SampleOut {
            logits,
            embedding: embedding.clone(),
            projection,
            block_features,
        };
        let cache = keep.then(|| SampleCache {
            input: x.to_vec(),
            blocks,
            pooled,
            embedding,
            hidden,
        });
        (out, cache)
    }

    fn assemble(&self, outs: &[SampleOut<S>]) -> ForwardOutput<S> {
        let n = outs.len();
        let cat = |f: &dyn Fn(&SampleOut<S>) -> &[S], width: usize| {
            let mut data = Vec::with_capacity(n * width);
            for o in outs {
                data.extend_from_slice(f(o));
            }
            Tensor::new(vec![n, width], data).expect("consistent widths")
        };
        let l = &self.layout;
        ForwardOutput {
            logits: cat(&|o| &o.logits, l.num_classes),
            embedding: cat(&|o| &o.embedding, l.embed_dim),
            projection: cat(&|o| &o.projection, l.projection_dim()),
            block_features: l
                .blocks
                .iter()
                .enumerate()
                .map(|(b, bl)| cat(&|o| &o.block_features[b], bl.out_dims[0]))
                .collect(),
        }
    }

    /// Forward pass that keeps activations for [`Model::backward`].
    pub fn forward(&mut self, batch: &Tensor<S>) -> Result<ForwardOutput<S>> {
        let n = self.check_batch(batch)?;
        let this = &*self;
        let results = self.exec.map_range(n, |i| this.forward_sample(batch.row(i), true));
        let (outs, caches): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let output = self.assemble(&outs);
        self.cache = Some(caches.into_iter().map(|c| c.expect("kept")).collect());
        Ok(output)
    }

    /// Forward pass without retaining activations; usable on a shared model.
    pub fn infer(&self, batch: &Tensor<S>) -> Result<ForwardOutput<S>> {
        let n = self.check_batch(batch)?;
        let outs: Vec<SampleOut<S>> = self
            .exec
            .map_range(n, |i| self.forward_sample(batch.row(i), false).0);
        Ok(self.assemble(&outs))
    }

    /// Like [`Model::infer`], also returning a fingerprint of every ReLU
    /// on/off state and max-pool winner. Two inputs with equal fingerprints
    /// lie in the same linear region of the network.
    pub fn infer_with_pattern(&self, batch: &Tensor<S>) -> Result<(ForwardOutput<S>, u64)> {
        let n = self.check_batch(batch)?;
        let results = self.exec.map_range(n, |i| self.forward_sample(batch.row(i), true));
        let mut hasher = DefaultHasher::new();
        let mut outs = Vec::with_capacity(n);
        for (out, cache) in results {
            let sc = cache.expect("kept");
            let on = |v: &[S]| v.iter().map(|&x| x > S::zero()).collect::<Vec<bool>>();
            for b in &sc.blocks {
                if let Some(mid) = &b.mid {
                    on(mid).hash(&mut hasher);
                }
                on(&b.act).hash(&mut hasher);
                b.argmax.hash(&mut hasher);
            }
            on(&sc.embedding).hash(&mut hasher);
            if let Some(h) = &sc.hidden {
                on(h).hash(&mut hasher);
            }
            outs.push(out);
        }
        Ok((self.assemble(&outs), hasher.finish()))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    /// Post-ReLU, pre-pool activation `[C, T', H', W']` of `block` for batch
    /// row `sample` from the last [`Model::forward`].
    pub fn cached_activation(&self, sample: usize, block: usize) -> Result<Tensor<S>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("no cached forward pass".into()))?;
        let sc = cache
            .get(sample)
            .ok_or_else(|| Error::Argument(format!("sample {sample} not in cached batch")))?;
        let bc = sc
            .blocks
            .get(block)
            .ok_or_else(|| Error::Argument(format!("block {block} does not exist")))?;
        Tensor::new(self.layout.blocks[block].act_dims.to_vec(), bc.act.clone())
    }

    fn backward_sample(
        &self,
        sc: &SampleCache<S>,
        g_logits: Option<&[S]>,
        g_embedding: Option<&[S]>,
        g_projection: Option<&[S]>,
        want_input: bool,
    ) -> (ParamSet<S>, Option<Vec<S>>) {
        let l = &self.layout;
        let p = &self.params;
        let mut grads = l.zeros::<S>();
        let mut g_emb = g_embedding.map_or_else(|| vec![S::zero(); l.embed_dim], |g| g.to_vec());
        if let Some(gl) = g_logits {
            let ci = l.classifier_index;
            let (gw, gb) = grads.pair_mut(ci);
            let back = linear_backward(p.at(ci), &sc.embedding, gl, gw, gb);
            for (a, b) in g_emb.iter_mut().zip(back) {
                *a += b;
            }
        }
        if let Some(gp) = g_projection {
            match (l.head_index, &sc.hidden) {
                (Some(hi), Some(h)) => {
                    let (gw2, gb2) = grads.pair_mut(hi + 2);
                    let mut gh = linear_backward(p.at(hi + 2), h, gp, gw2, gb2);
                    relu_mask(&mut gh, h);
                    let (gw1, gb1) = grads.pair_mut(hi);
                    let back = linear_backward(p.at(hi), &sc.embedding, &gh, gw1, gb1);
                    for (a, b) in g_emb.iter_mut().zip(back) {
                        *a += b;
                    }
                }
                _ => {
                    for (a, &b) in g_emb.iter_mut().zip(gp) {
                        *a += b;
                    }
                }
            }
        }
        relu_mask(&mut g_emb, &sc.embedding);
        let ei = l.embed_index;
        let (gw, gb) = grads.pair_mut(ei);
        let g_pooled = linear_backward(p.at(ei), &sc.pooled, &g_emb, gw, gb);

        let last = l.blocks.len() - 1;
        let positions = l.blocks[last].out_dims[1..].iter().product();
        let mut g_out = global_avg_pool_backward(&g_pooled, positions);
        let mut scratch = Vec::new();
        for bi in (0..l.blocks.len()).rev() {
            let bl = &l.blocks[bi];
            let bc = &sc.blocks[bi];
            let input: &[S] = if bi == 0 { &sc.input } else { &sc.blocks[bi - 1].out };
            let mut g_act = match &bc.argmax {
                Some(idx) => max_pool_backward(&g_out, idx, bc.act.len()),
                None => g_out,
            };
            relu_mask(&mut g_act, &bc.act);
            let need_input = bi > 0 || want_input;
            let mut g_in = if need_input { vec![S::zero(); bl.first.in_len()] } else { Vec::new() };
            let pi = bl.param_index;
            match (&bl.second, &bc.mid) {
                (None, _) => {
                    let (gw, gb) = grads.pair_mut(pi);
                    conv_backward_sample(
                        &bl.first,
                        input,
                        p.at(pi).data(),
                        &g_act,
                        gw.data_mut(),
                        gb.data_mut(),
                        need_input.then_some(&mut g_in[..]),
                        &mut scratch,
                    );
                }
                (Some(gt), Some(mid)) => {
                    let mut g_mid = vec![S::zero(); mid.len()];
                    let (gtw, gtb) = grads.pair_mut(pi + 2);
                    conv_backward_sample(
                        gt,
                        mid,
                        p.at(pi + 2).data(),
                        &g_act,
                        gtw.data_mut(),
                        gtb.data_mut(),
                        Some(&mut g_mid),
                        &mut scratch,
                    );
                    if bl.inner_relu {
                        relu_mask(&mut g_mid, mid);
                    }
                    let (gsw, gsb) = grads.pair_mut(pi);
                    conv_backward_sample(
                        &bl.first,
                        input,
                        p.at(pi).data(),
                        &g_mid,
                        gsw.data_mut(),
                        gsb.data_mut(),
                        need_input.then_some(&mut g_in[..]),
                        &mut scratch,
                    );
                }
                (Some(_), None) => unreachable!("(2+1)D cache always holds the mid activation"),
            }
            g_out = g_in;
        }
        (grads, want_input.then_some(g_out))
    }

    fn upstream_rows<'a>(t: &'a Option<Tensor<S>>, n: usize, width: usize, what: &str) -> Result<Option<&'a Tensor<S>>> {
        match t {
            None => Ok(None),
            Some(t) if t.dims() == [n, width] => Ok(Some(t)),
            Some(t) => Err(Error::Shape(format!(
                "upstream {what} gradient {:?} does not match [{n}, {width}]",
                t.dims()
            ))),
        }
    }

    fn backward_impl(&self, upstream: &Upstream<S>, want_input: bool) -> Result<(ParamSet<S>, Option<Tensor<S>>)> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let n = cache.len();
        let l = &self.layout;
        let gl = Self::upstream_rows(&upstream.logits, n, l.num_classes, "logits")?;
        let ge = Self::upstream_rows(&upstream.embedding, n, l.embed_dim, "embedding")?;
        let gp = Self::upstream_rows(&upstream.projection, n, l.projection_dim(), "projection")?;
        let per_sample = self.exec.map(cache, |i, sc| {
            self.backward_sample(
                sc,
                gl.map(|t| t.row(i)),
                ge.map(|t| t.row(i)),
                gp.map(|t| t.row(i)),
                want_input,
            )
        });
        let mut total = l.zeros::<S>();
        let mut input_grads = Vec::new();
        for (g, gi) in per_sample {
            total.add_assign(&g)?;
            if let Some(gi) = gi {
                input_grads.extend(gi);
            }
        }
        let input_grad = if want_input {
            let i = self.config.input;
            Some(Tensor::new(vec![n, i.channels, i.frames, i.height, i.width], input_grads)?)
        } else {
            None
        };
        Ok((total, input_grad))
    }

    /// Parameter gradients of the last forward pass, summed over the batch.
    pub fn backward(&self, upstream: &Upstream<S>) -> Result<ParamSet<S>> {
        Ok(self.backward_impl(upstream, false)?.0)
    }

    /// Like [`Model::backward`] but also returns `d loss / d input`.
    pub fn backward_with_input(&self, upstream: &Upstream<S>) -> Result<(ParamSet<S>, Tensor<S>)> {
        let (g, gi) = self.backward_impl(upstream, true)?;
        Ok((g, gi.expect("requested")))
    }

    /// Names of the backbone (conv) parameters.
    pub fn backbone_names(&self) -> Vec<String> {
        self.params
            .names()
            .iter()
            .filter(|n| n.starts_with("block"))
            .cloned()
            .collect()
    }
}
