//! Reverse-mode automatic differentiation over dense `f64` tensors, with the
//! convolution, normalization and resampling layers needed by small
//! encoder/decoder networks, an Adam optimizer and a binary checkpoint format.
//!
//! Convolutions use the cross-correlation convention (kernels are not flipped).

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use error::{Error, Result};
pub use optim::Adam;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{BnMode, ConvSpec, RunningStats, Tape, Var, BN_EPS};
pub use tensor::Tensor;
