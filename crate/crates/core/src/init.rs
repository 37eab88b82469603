use rand::Rng;
use voxgraph_tensor::{Element, Tensor};

/// Values drawn uniformly from `±sqrt(1 / fan_in)`.
pub fn uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}
