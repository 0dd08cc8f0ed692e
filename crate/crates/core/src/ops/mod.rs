//! Layer primitives with explicit forward and backward passes.
//!
//! Every reduction runs sequentially over the flat index so results are
//! bit-reproducible for a fixed input.

mod activation;
pub(crate) mod batchnorm;
pub(crate) mod conv;
pub mod gradcheck;
mod loss;
mod matmul;

pub use activation::{maxpool2d, maxpool2d_backward, relu, relu_backward, PoolCache};
pub use batchnorm::{batchnorm_backward, batchnorm_forward, BnCache, BnState, BN_EPS, BN_MOMENTUM};
pub use conv::{conv2d, conv2d_backward, ConvGeom};
pub use gradcheck::grad_check;
pub use loss::{argmax_rows, softmax_cross_entropy};
pub use matmul::{matmul, matmul_backward};
