//! Forward and backward kernels on plain tensors.
//!
//! These are pure functions; [`Tape`](crate::Tape) records calls to them and
//! chains their backward rules.

pub mod conv;
pub mod gather;
pub mod matmul;
pub mod reduce;
pub mod shape;
pub mod softmax;

pub use conv::{conv3d, conv_transpose3d};
pub use gather::{gather_rows, mul_rows, scatter_add_rows, segment_softmax, select_class};
pub use matmul::{matmul, transpose_last2};
pub use reduce::sum_axes;
pub use shape::concat;
pub use softmax::{log_softmax, softmax};

use crate::element::Element;
use crate::tensor::Tensor;

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn leaky_relu<T: Element>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { v * slope })
}
