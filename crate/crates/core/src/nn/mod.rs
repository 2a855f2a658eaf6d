//! Minimal tensor and layer engine: convolution, average pooling, dense,
//! dropout and softmax layers with reverse-mode gradients.

pub mod network;
pub mod ops;
pub mod tensor;

pub use network::{DropoutMode, GradientTape, LayerKind, LayerSpec, Sequential};
pub use ops::{
    avgpool2x2, conv2d_forward, dense_forward, dropout_apply, sgd_step, softmax_cross_entropy,
    softmax_cross_entropy_batch, softmax_f64, Activation, DropoutMask,
};
pub use tensor::{Scalar, Tensor};
