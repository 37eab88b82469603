use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::{split_axis, Tensor};

fn check_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::invalid(
            op,
            format!("axis {} out of range for shape {:?}", axis, shape),
        ));
    }
    Ok(())
}

/// Visits every 1-D lane along `axis`, handing the closure the lane's element
/// indices as (base offset, stride, length).
fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (outer, len, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner, len);
        }
    }
}

const LANES: usize = 8;

/// Max over a slice with independent per-lane accumulators.
fn lane_max<T: Element>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] = if c[l] > acc[l] { c[l] } else { acc[l] };
        }
    }
    tail.iter().chain(&acc).fold(T::neg_infinity(), |m, &v| m.max(v))
}

/// Sum over a slice in a fixed lane-strided order.
fn lane_sum<T: Element>(xs: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    acc.iter().chain(tail).fold(T::zero(), |s, &v| s + v)
}

fn softmax_row<T: Element>(row: &mut [T]) {
    let max = lane_max(row);
    for v in row.iter_mut() {
        *v = *v - max;
    }
    T::exp_slice(row);
    let total = lane_sum(row);
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Numerically stable softmax along `axis` (max-subtracted).
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis, "softmax")?;
    let mut out = x.clone();
    let (_, len, inner) = split_axis(x.shape(), axis);
    if inner == 1 {
        out.data_mut().chunks_exact_mut(len.max(1)).for_each(softmax_row);
        return Ok(out);
    }
    let data = out.data_mut();
    for_each_lane(x.shape(), axis, |base, stride, len| {
        let mut max = T::neg_infinity();
        for j in 0..len {
            max = max.max(data[base + j * stride]);
        }
        let mut total = T::zero();
        for j in 0..len {
            let e = (data[base + j * stride] - max).exp();
            data[base + j * stride] = e;
            total += e;
        }
        let inv = T::one() / total;
        for j in 0..len {
            data[base + j * stride] *= inv;
        }
    });
    Ok(out)
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` along the axis, where `y` is the softmax output.
pub fn softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let mut dx = dy.clone();
    let (_, len, inner) = split_axis(y.shape(), axis);
    if inner == 1 {
        let len = len.max(1);
        for (yr, dr) in y.data().chunks_exact(len).zip(dx.data_mut().chunks_exact_mut(len)) {
            let mut acc = [T::zero(); LANES];
            for (yc, dc) in yr.chunks(LANES).zip(dr.chunks(LANES)) {
                for l in 0..yc.len() {
                    acc[l] += yc[l] * dc[l];
                }
            }
            let dot = lane_sum(&acc);
            for (d, &yv) in dr.iter_mut().zip(yr) {
                *d = yv * (*d - dot);
            }
        }
        return dx;
    }
    let (yd, dd) = (y.data(), dx.data_mut());
    for_each_lane(y.shape(), axis, |base, stride, len| {
        let mut dot = T::zero();
        for j in 0..len {
            let idx = base + j * stride;
            dot += yd[idx] * dd[idx];
        }
        for j in 0..len {
            let idx = base + j * stride;
            dd[idx] = yd[idx] * (dd[idx] - dot);
        }
    });
    dx
}

pub fn log_softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    check_axis(x.shape(), axis, "log_softmax")?;
    let mut out = x.clone();
    let data = out.data_mut();
    for_each_lane(x.shape(), axis, |base, stride, len| {
        let mut max = T::neg_infinity();
        for j in 0..len {
            max = max.max(data[base + j * stride]);
        }
        let mut total = T::zero();
        for j in 0..len {
            total += (data[base + j * stride] - max).exp();
        }
        let lse = max + total.ln();
        for j in 0..len {
            data[base + j * stride] -= lse;
        }
    });
    Ok(out)
}

/// `dx = dy − softmax ⊙ Σ dy`, with softmax recovered as `exp(log_softmax)`.
pub fn log_softmax_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let mut dx = dy.clone();
    let (yd, dd) = (y.data(), dx.data_mut());
    for_each_lane(y.shape(), axis, |base, stride, len| {
        let mut total = T::zero();
        for j in 0..len {
            total += dd[base + j * stride];
        }
        for j in 0..len {
            let idx = base + j * stride;
            dd[idx] -= yd[idx].exp() * total;
        }
    });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_and_overflow_safe() {
        let x = Tensor::<f32>::new(vec![3], vec![0.0; 3]).unwrap();
        let y = softmax(&x, 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let x = Tensor::<f32>::new(vec![2], vec![1000.0, 1000.0]).unwrap();
        assert_eq!(softmax(&x, 0).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn strided_axis() {
        // [2, 3] softmax over axis 0 → each column normalizes independently.
        let x = Tensor::<f64>::new(vec![2, 3], vec![0.0, 1.0, 2.0, 0.0, 3.0, -2.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        for c in 0..3 {
            let s = y.data()[c] + y.data()[3 + c];
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let x = Tensor::<f64>::new(vec![2, 4], vec![0.3, -1.0, 2.0, 0.0, 5.0, 5.0, -3.0, 1.0]).unwrap();
        let a = log_softmax(&x, 1).unwrap();
        let b = softmax(&x, 1).unwrap().map(f64::ln);
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn bad_axis() {
        let x = Tensor::<f32>::zeros(&[2, 2]);
        assert!(softmax(&x, 2).is_err());
    }
}
