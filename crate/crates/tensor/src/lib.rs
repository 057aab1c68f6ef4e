//! Dense tensors with tape-based reverse-mode differentiation, sized for
//! Gabor-fronted 3D convolutional palmprint networks.
//!
//! - [`Tensor`]: row-major n-d values, `f32` for training and `f64` for
//!   gradient checks.
//! - [`Graph`]: records ops (convolutions, batch norm, pooling, dense
//!   layers, losses) and back-propagates.
//! - [`ParamStore`], [`Sgd`], [`CosineSchedule`]: parameters and optimization.
//! - [`checkpoint`]: the on-disk container for named arrays.

pub mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod param;
mod tensor;

pub use element::{DType, Element};
pub use error::{Result, TensorError};
pub use graph::{BnMode, Graph, MarginPlacement, RunningStats, Var, BN_EPS, BN_MOMENTUM};
pub use kernels::{conv3d_output_shape, conv_output_len, ConvGeometry};
pub use optim::{CosineSchedule, Sgd};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
