//! Forward and backward kernels for every layer the stage networks use.

mod activation;
mod batchnorm;
mod conv;
mod dense;
mod gemm;
mod pool;

pub use activation::{dropout, relu, relu_backward, softmax, softmax_backward};
pub use batchnorm::{
    batchnorm_backward, batchnorm_forward, BatchNormCache, BatchNormGrads, BatchNormOutput,
    BatchNormParams, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};
pub use conv::{conv2d_backward, conv2d_forward, ConvGrads, ConvParams};
pub use dense::{dense_backward, dense_forward, DenseGrads};
pub use pool::{avg_pool2, avg_pool2_backward, max_pool2, max_pool2_backward, pooled_extent, MaxPoolOutput};

/// Whether a forward pass is part of training (batch statistics, live
/// dropout) or inference (moving statistics, dropout disabled).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}
