//! A minimal differentiable network stack for video clips.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod params;
pub mod pool;
pub mod scalar;
pub mod tensor;

pub use conv::{conv2plus1d_forward, conv3d_backward, conv3d_forward, Conv2Plus1dWeights, ConvGeom};
pub use model::{
    BlockConfig, ConvKind, ForwardOutput, InputShape, Model, ModelConfig, PoolKind, ProjectionHead,
    Upstream,
};
pub use optim::Sgd;
pub use params::ParamSet;
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Row-wise softmax with max subtraction.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let mut out = logits.clone();
    let width = logits.dims()[logits.rank() - 1];
    for row in out.data_mut().chunks_exact_mut(width) {
        let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut sum = S::zero();
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x = *x / sum;
        }
    }
    out
}
