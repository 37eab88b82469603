//! Dense tensors and recorded reverse-mode gradients for 3D segmentation networks.
//!
//! Values are row-major with the volumetric layout `[B, C, D, H, W]`. Training
//! runs in `f32`; gradient checking runs the same code in `f64`.

pub mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
pub mod ops;
mod param;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use element::{DType, Element, Layout};
pub use error::{Result, TensorError};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{numel, strides, Tensor};
