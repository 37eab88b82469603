use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{strides, Tensor};

/// Maps each input flat index to its flat index in the reduced output.
struct Reduction {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    /// Output stride for every input axis (0 for reduced axes).
    out_strides: Vec<usize>,
}

impl Reduction {
    fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let mut reduced = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || reduced[a] {
                return Err(TensorError::invalid(
                    "sum_axes",
                    format!("bad axis list {:?} for shape {:?}", axes, shape),
                ));
            }
            reduced[a] = true;
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        let kept = strides(&out_shape);
        let mut out_strides = vec![0; shape.len()];
        let mut k = 0;
        for (i, &r) in reduced.iter().enumerate() {
            if !r {
                out_strides[i] = kept[k];
                k += 1;
            }
        }
        Ok(Reduction {
            in_shape: shape.to_vec(),
            out_shape,
            out_strides,
        })
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let nd = self.in_shape.len();
        let total: usize = self.in_shape.iter().product();
        let mut idx = vec![0usize; nd];
        let mut out = 0usize;
        for i in 0..total {
            f(i, out);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                out += self.out_strides[ax];
                if idx[ax] < self.in_shape[ax] {
                    break;
                }
                out -= self.out_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
    }
}

/// Sums over `axes`, removing them from the shape.
pub fn sum_axes<T: Element>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let r = Reduction::new(x.shape(), axes)?;
    let mut out = vec![T::zero(); r.out_shape.iter().product()];
    let data = x.data();
    r.for_each(|i, o| out[o] += data[i]);
    Tensor::new(r.out_shape, out)
}

/// Broadcasts a reduced gradient back over the summed axes.
pub fn sum_axes_backward<T: Element>(in_shape: &[usize], axes: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let r = Reduction::new(in_shape, axes)?;
    let mut out = vec![T::zero(); in_shape.iter().product()];
    let g = dy.data();
    r.for_each(|i, o| out[i] = g[o]);
    Tensor::new(in_shape.to_vec(), out)
}
