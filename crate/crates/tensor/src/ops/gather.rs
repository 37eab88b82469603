//! Index-driven row operations used by message passing, and the class pick
//! used by cross-entropy.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

fn rows_cols<T: Element>(x: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(TensorError::shape(op, format!("expected a matrix, got {:?}", s))),
    }
}

/// `out[e] = x[index[e]]` row-wise.
pub fn gather_rows<T: Element>(x: &Tensor<T>, index: &[usize]) -> Result<Tensor<T>> {
    let (n, f) = rows_cols(x, "gather_rows")?;
    let mut out = Vec::with_capacity(index.len() * f);
    for &i in index {
        if i >= n {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {} out of range for {} rows", i, n),
            ));
        }
        out.extend_from_slice(&x.data()[i * f..(i + 1) * f]);
    }
    Tensor::new(vec![index.len(), f], out)
}

/// `out[index[e]] += x[e]` row-wise into `rows` output rows.
pub fn scatter_add_rows<T: Element>(x: &Tensor<T>, index: &[usize], rows: usize) -> Result<Tensor<T>> {
    let (e, f) = rows_cols(x, "scatter_add_rows")?;
    if e != index.len() {
        return Err(TensorError::shape(
            "scatter_add_rows",
            format!("{} rows but {} indices", e, index.len()),
        ));
    }
    let mut out = vec![T::zero(); rows * f];
    for (r, &i) in index.iter().enumerate() {
        if i >= rows {
            return Err(TensorError::invalid(
                "scatter_add_rows",
                format!("target row {} out of range for {} rows", i, rows),
            ));
        }
        let dst = &mut out[i * f..(i + 1) * f];
        for (d, &s) in dst.iter_mut().zip(&x.data()[r * f..(r + 1) * f]) {
            *d += s;
        }
    }
    Tensor::new(vec![rows, f], out)
}

/// Softmax of a 1-D score vector within groups given by `segment[e]`.
///
/// Every entry must belong to a group in `0..n_segments`; groups may be empty.
pub fn segment_softmax<T: Element>(scores: &Tensor<T>, segment: &[usize], n_segments: usize) -> Result<Tensor<T>> {
    if scores.shape() != [segment.len()] {
        return Err(TensorError::shape(
            "segment_softmax",
            format!("scores {:?} vs {} segment ids", scores.shape(), segment.len()),
        ));
    }
    if let Some(&bad) = segment.iter().find(|&&s| s >= n_segments) {
        return Err(TensorError::invalid(
            "segment_softmax",
            format!("segment id {} out of range for {}", bad, n_segments),
        ));
    }
    let s = scores.data();
    let mut max = vec![T::neg_infinity(); n_segments];
    for (e, &g) in segment.iter().enumerate() {
        max[g] = max[g].max(s[e]);
    }
    let mut total = vec![T::zero(); n_segments];
    let mut out: Vec<T> = segment
        .iter()
        .enumerate()
        .map(|(e, &g)| {
            let v = (s[e] - max[g]).exp();
            total[g] += v;
            v
        })
        .collect();
    for (v, &g) in out.iter_mut().zip(segment) {
        *v /= total[g];
    }
    Tensor::new(vec![segment.len()], out)
}

pub fn segment_softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>, segment: &[usize], n_segments: usize) -> Tensor<T> {
    let mut dot = vec![T::zero(); n_segments];
    for (e, &g) in segment.iter().enumerate() {
        dot[g] += y.data()[e] * dy.data()[e];
    }
    Tensor::from_fn(y.shape(), |e| y.data()[e] * (dy.data()[e] - dot[segment[e]]))
}

/// Scales row `e` of `x [E, F]` by `w[e]`.
pub fn mul_rows<T: Element>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (e, f) = rows_cols(x, "mul_rows")?;
    if w.shape() != [e] {
        return Err(TensorError::shape(
            "mul_rows",
            format!("weights {:?} for {} rows", w.shape(), e),
        ));
    }
    Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] * w.data()[i / f]))
}

/// `out[b, s...] = x[b, class[b, s...], s...]` for `x [B, C, S...]`.
pub fn select_class<T: Element>(x: &Tensor<T>, classes: &[usize]) -> Result<Tensor<T>> {
    if x.ndim() < 2 {
        return Err(TensorError::shape("select_class", "need [B, C, ...]"));
    }
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let s = numel(&x.shape()[2..]);
    if classes.len() != b * s {
        return Err(TensorError::shape(
            "select_class",
            format!("{} class ids for {} positions", classes.len(), b * s),
        ));
    }
    let mut out = Vec::with_capacity(b * s);
    for bi in 0..b {
        for si in 0..s {
            let k = classes[bi * s + si];
            if k >= c {
                return Err(TensorError::invalid(
                    "select_class",
                    format!("class {} out of range for {} channels", k, c),
                ));
            }
            out.push(x.data()[(bi * c + k) * s + si]);
        }
    }
    let mut shape = vec![b];
    shape.extend_from_slice(&x.shape()[2..]);
    Tensor::new(shape, out)
}

pub fn select_class_backward<T: Element>(in_shape: &[usize], classes: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (in_shape[0], in_shape[1]);
    let s = numel(&in_shape[2..]);
    let mut out = Tensor::zeros(in_shape);
    let d = out.data_mut();
    for bi in 0..b {
        for si in 0..s {
            let k = classes[bi * s + si];
            d[(bi * c + k) * s + si] += dy.data()[bi * s + si];
        }
    }
    out
}
