//! 3D convolution (cross-correlation) by im2col + GEMM, and the (2+1)D
//! factorization built from it.

use crate::error::{Error, Result};

use super::scalar::{gemm, MatRef, Scalar};
use super::tensor::Tensor;

/// Static geometry of one convolution over a single sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_dims: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub out_dims: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        in_channels: usize,
        in_dims: [usize; 3],
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let mut out_dims = [0; 3];
        for a in 0..3 {
            if kernel[a] == 0 || stride[a] == 0 {
                return Err(Error::Shape(format!(
                    "kernel {kernel:?} and stride {stride:?} must be positive"
                )));
            }
            let span = in_dims[a] + 2 * padding[a];
            if span < kernel[a] {
                return Err(Error::Shape(format!(
                    "kernel {kernel:?} larger than padded input {in_dims:?} (padding {padding:?})"
                )));
            }
            out_dims[a] = (span - kernel[a]) / stride[a] + 1;
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Shape("channel counts must be positive".into()));
        }
        Ok(Self {
            in_channels,
            out_channels,
            in_dims,
            kernel,
            stride,
            padding,
            out_dims,
        })
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_dims.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_positions()
    }

    /// Rows of the im2col matrix: `C * kt * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn weight_dims(&self) -> [usize; 5] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }
}

/// Walks every (patch row, output position) pair of the im2col matrix and
/// hands the matching flat input index (or `None` inside padding) to `f`.
#[inline]
fn for_each_patch<F: FnMut(usize, usize, Option<usize>)>(g: &ConvGeom, mut f: F) {
    let [it, ih, iw] = g.in_dims;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [ot, oh, ow] = g.out_dims;
    let positions = ot * oh * ow;
    let mut row = 0;
    for c in 0..g.in_channels {
        for dt in 0..kt {
            for dy in 0..kh {
                for dx in 0..kw {
                    let base = row * positions;
                    for zt in 0..ot {
                        let t = (zt * st + dt) as isize - pt as isize;
                        for zy in 0..oh {
                            let y = (zy * sh + dy) as isize - ph as isize;
                            let col0 = base + (zt * oh + zy) * ow;
                            let in_plane = t >= 0 && (t as usize) < it && y >= 0 && (y as usize) < ih;
                            let line = if in_plane {
                                ((c * it + t as usize) * ih + y as usize) * iw
                            } else {
                                0
                            };
                            for zx in 0..ow {
                                let x = (zx * sw + dx) as isize - pw as isize;
                                let src = if in_plane && x >= 0 && (x as usize) < iw {
                                    Some(line + x as usize)
                                } else {
                                    None
                                };
                                f(row, col0 + zx, src);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

fn im2col<S: Scalar>(g: &ConvGeom, input: &[S], cols: &mut Vec<S>) {
    cols.clear();
    cols.resize(g.patch_len() * g.out_positions(), S::zero());
    for_each_patch(g, |_, dst, src| {
        if let Some(i) = src {
            cols[dst] = input[i];
        }
    });
}

fn col2im_add<S: Scalar>(g: &ConvGeom, cols: &[S], grad_input: &mut [S]) {
    for_each_patch(g, |_, src_col, dst| {
        if let Some(i) = dst {
            grad_input[i] += cols[src_col];
        }
    });
}

/// Single-sample forward: `out [K, P] = W [K, CK] * cols [CK, P] + b`.
pub fn conv_forward_sample<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[S],
    bias: &[S],
    out: &mut [S],
    scratch: &mut Vec<S>,
) {
    debug_assert_eq!(input.len(), g.in_len());
    debug_assert_eq!(out.len(), g.out_len());
    let p = g.out_positions();
    for (k, chunk) in out.chunks_exact_mut(p).enumerate() {
        chunk.fill(bias[k]);
    }
    im2col(g, input, scratch);
    gemm(
        MatRef::new(weight, g.out_channels, g.patch_len()),
        MatRef::new(scratch, g.patch_len(), p),
        S::one(),
        out,
    );
}

/// Single-sample backward. Accumulates into `grad_weight` / `grad_bias`
/// and, when given, overwrites `grad_input`.
pub fn conv_backward_sample<S: Scalar>(
    g: &ConvGeom,
    input: &[S],
    weight: &[S],
    grad_out: &[S],
    grad_weight: &mut [S],
    grad_bias: &mut [S],
    grad_input: Option<&mut [S]>,
    scratch: &mut Vec<S>,
) {
    let p = g.out_positions();
    let ck = g.patch_len();
    for (k, chunk) in grad_out.chunks_exact(p).enumerate() {
        grad_bias[k] += chunk.iter().copied().sum::<S>();
    }
    im2col(g, input, scratch);
    gemm(
        MatRef::new(grad_out, g.out_channels, p),
        MatRef::new(scratch, ck, p).t(),
        S::one(),
        grad_weight,
    );
    if let Some(gi) = grad_input {
        gemm(
            MatRef::new(weight, g.out_channels, ck).t(),
            MatRef::new(grad_out, g.out_channels, p),
            S::zero(),
            scratch,
        );
        gi.fill(S::zero());
        col2im_add(g, scratch, gi);
    }
}

fn check_conv_shapes<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<ConvGeom> {
    let (id, wd) = (input.dims(), weight.dims());
    if id.len() != 5 || wd.len() != 5 || wd[1] != id[1] || bias.dims() != [wd[0]] {
        return Err(Error::Shape(format!(
            "conv3d: input {id:?} [N,C,T,H,W] incompatible with weight {wd:?} [K,C,kt,kh,kw] / bias {:?}",
            bias.dims()
        )));
    }
    ConvGeom::new(id[1], [id[2], id[3], id[4]], wd[0], [wd[2], wd[3], wd[4]], stride, padding)
}

/// Batched 3D cross-correlation with zero padding.
pub fn conv3d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor<S>> {
    let g = check_conv_shapes(input, weight, bias, stride, padding)?;
    let n = input.dims()[0];
    let mut out = Tensor::zeros(&[n, g.out_channels, g.out_dims[0], g.out_dims[1], g.out_dims[2]]);
    let mut scratch = Vec::new();
    for i in 0..n {
        conv_forward_sample(&g, input.row(i), weight.data(), bias.data(), out.row_mut(i), &mut scratch);
    }
    Ok(out)
}

/// Gradients of a batched conv3d: `(grad_input, grad_weight, grad_bias)`.
pub fn conv3d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let bias = Tensor::zeros(&[weight.dims()[0]]);
    let g = check_conv_shapes(input, weight, &bias, stride, padding)?;
    let n = input.dims()[0];
    let expected = [n, g.out_channels, g.out_dims[0], g.out_dims[1], g.out_dims[2]];
    if grad_out.dims() != expected {
        return Err(Error::Shape(format!(
            "conv3d backward: upstream {:?} does not match output {expected:?}",
            grad_out.dims()
        )));
    }
    let mut gi = Tensor::zeros(input.dims());
    let mut gw = Tensor::zeros(weight.dims());
    let mut gb = Tensor::zeros(&[g.out_channels]);
    let mut scratch = Vec::new();
    for i in 0..n {
        conv_backward_sample(
            &g,
            input.row(i),
            weight.data(),
            grad_out.row(i),
            gw.data_mut(),
            gb.data_mut(),
            Some(gi.row_mut(i)),
            &mut scratch,
        );
    }
    Ok((gi, gw, gb))
}

/// Weights of one (2+1)D block: a `1 x kh x kw` spatial conv into
/// `mid` channels followed by a `kt x 1 x 1` temporal conv.
#[derive(Clone, Debug)]
pub struct Conv2Plus1dWeights<'a, S> {
    pub spatial_weight: &'a Tensor<S>,
    pub spatial_bias: &'a Tensor<S>,
    pub temporal_weight: &'a Tensor<S>,
    pub temporal_bias: &'a Tensor<S>,
}

/// Spatial conv, optional ReLU, temporal conv. Stride and padding are split
/// per factor: the spatial conv takes the `(h, w)` parts, the temporal conv
/// the `t` part.
pub fn conv2plus1d_forward<S: Scalar>(
    input: &Tensor<S>,
    w: &Conv2Plus1dWeights<'_, S>,
    stride: [usize; 3],
    padding: [usize; 3],
    inner_relu: bool,
) -> Result<Tensor<S>> {
    let sk = w.spatial_weight.dims();
    let tk = w.temporal_weight.dims();
    if sk.len() != 5 || tk.len() != 5 || sk[2] != 1 || tk[3] != 1 || tk[4] != 1 || tk[1] != sk[0] {
        return Err(Error::Shape(format!(
            "(2+1)D factors must be [M,C,1,kh,kw] and [K,M,kt,1,1], got {sk:?} and {tk:?}"
        )));
    }
    let mut mid = conv3d_forward(
        input,
        w.spatial_weight,
        w.spatial_bias,
        [1, stride[1], stride[2]],
        [0, padding[1], padding[2]],
    )?;
    if inner_relu {
        for x in mid.data_mut() {
            *x = x.max(S::zero());
        }
    }
    conv3d_forward(
        &mid,
        w.temporal_weight,
        w.temporal_bias,
        [stride[0], 1, 1],
        [padding[0], 0, 0],
    )
}
