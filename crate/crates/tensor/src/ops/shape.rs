use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
    let nd = first.ndim();
    if axis >= nd {
        return Err(TensorError::invalid(
            "concat",
            format!("axis {} out of range for rank {}", axis, nd),
        ));
    }
    let mut total = 0;
    for p in parts {
        let same_rest = p.ndim() == nd
            && (0..nd).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
        if !same_rest {
            return Err(TensorError::shape(
                "concat",
                format!("{:?} vs {:?} along axis {}", p.shape(), first.shape(), axis),
            ));
        }
        total += p.shape()[axis];
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Splits `grad` along `axis` into pieces with the given extents.
pub fn split<T: Element>(grad: &Tensor<T>, axis: usize, extents: &[usize]) -> Result<Vec<Tensor<T>>> {
    let outer = numel(&grad.shape()[..axis]);
    let inner = numel(&grad.shape()[axis + 1..]);
    let total: usize = extents.iter().sum();
    if total != grad.shape()[axis] {
        return Err(TensorError::shape("split", "extents do not cover axis"));
    }
    let mut pieces: Vec<Vec<T>> = extents
        .iter()
        .map(|&e| Vec::with_capacity(outer * e * inner))
        .collect();
    for o in 0..outer {
        let mut offset = o * total * inner;
        for (piece, &e) in pieces.iter_mut().zip(extents) {
            piece.extend_from_slice(&grad.data()[offset..offset + e * inner]);
            offset += e * inner;
        }
    }
    pieces
        .into_iter()
        .zip(extents)
        .map(|(data, &e)| {
            let mut shape = grad.shape().to_vec();
            shape[axis] = e;
            Tensor::new(shape, data)
        })
        .collect()
}
