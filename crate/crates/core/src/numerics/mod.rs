//! Dense tensors, convolutional kernels and reverse-mode differentiation.

mod checkpoint;
mod element;
mod ops;
mod tape;
mod tensor;

pub use checkpoint::{AnyTensor, Checkpoint, FORMAT_VERSION, MAGIC};
pub use element::{DType, Element};
pub use ops::{
    batchnorm2d, conv2d, leaky_relu, maxpool2d, maxpool2d_with_argmax, transposed_conv2d, Mode,
    RunningStats, BN_EPS, BN_MOMENTUM,
};
pub(crate) use tape::mix;
pub use tape::{Function, Tape, Var};
pub use tensor::Tensor;
