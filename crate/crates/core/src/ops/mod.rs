//! Differentiable primitives with explicit backward passes.

pub mod conv;
pub mod dense;
pub mod gradcheck;
pub mod pool;
pub mod relu;

pub use conv::{conv2d_backward, conv2d_backward_input, conv2d_backward_params, conv2d_forward, ConvGeometry};
pub use dense::{affine_backward, affine_backward_input, affine_forward, gap_backward, gap_forward, sigmoid, sigmoid_backward, sigmoid_forward};
pub use gradcheck::gradient_check;
pub use pool::{maxpool2d_backward, maxpool2d_forward, maxpool2d_gather, upsample2d_backward, upsample2d_forward};
pub use relu::{relu_backward, relu_forward, BackwardRule};
