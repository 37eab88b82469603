use crate::element::{Element, Layout};
use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

/// Resolved batched-matmul shapes. Leading (batch) axes must either match or
/// be absent on one operand, which is then shared across the batch.
#[derive(Debug, Clone)]
pub(crate) struct MatmulShape {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulShape {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(TensorError::shape(
                "matmul",
                format!("operands must be at least 2-D, got {:?} and {:?}", a, b),
            ));
        }
        let (a_lead, a_mat) = a.split_at(a.len() - 2);
        let (b_lead, b_mat) = b.split_at(b.len() - 2);
        if a_mat[1] != b_mat[0] {
            return Err(TensorError::shape(
                "matmul",
                format!("inner extents differ: {:?} · {:?}", a, b),
            ));
        }
        let lead = match (a_lead.is_empty(), b_lead.is_empty()) {
            (true, _) => b_lead,
            (_, true) => a_lead,
            _ if a_lead == b_lead => a_lead,
            _ => {
                return Err(TensorError::shape(
                    "matmul",
                    format!("batch axes differ: {:?} · {:?}", a, b),
                ))
            }
        };
        let mut out_shape = lead.to_vec();
        out_shape.extend_from_slice(&[a_mat[0], b_mat[1]]);
        Ok(MatmulShape {
            batch: numel(lead),
            m: a_mat[0],
            k: a_mat[1],
            n: b_mat[1],
            a_batched: !a_lead.is_empty(),
            b_batched: !b_lead.is_empty(),
            out_shape,
        })
    }
}

pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let s = MatmulShape::new(a.shape(), b.shape())?;
    let (m, k, n) = (s.m, s.k, s.n);
    let mut out = vec![T::zero(); s.batch * m * n];
    for i in 0..s.batch {
        let ao = if s.a_batched { i * m * k } else { 0 };
        let bo = if s.b_batched { i * k * n } else { 0 };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            &a.data()[ao..ao + m * k],
            Layout::row_major(k),
            &b.data()[bo..bo + k * n],
            Layout::row_major(n),
            T::zero(),
            &mut out[i * m * n..(i + 1) * m * n],
            Layout::row_major(n),
        );
    }
    Tensor::new(s.out_shape, out)
}

/// Gradients of `a · b`: `da = dy · bᵀ`, `db = aᵀ · dy`, reduced over the batch
/// for a shared (unbatched) operand.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = MatmulShape::new(a.shape(), b.shape())?;
    let (m, k, n) = (s.m, s.k, s.n);
    let mut da = vec![T::zero(); a.numel()];
    let mut db = vec![T::zero(); b.numel()];
    for i in 0..s.batch {
        let ao = if s.a_batched { i * m * k } else { 0 };
        let bo = if s.b_batched { i * k * n } else { 0 };
        let g = &dy.data()[i * m * n..(i + 1) * m * n];
        let a_beta = if s.a_batched || i == 0 { T::zero() } else { T::one() };
        T::gemm(
            m,
            n,
            k,
            T::one(),
            g,
            Layout::row_major(n),
            &b.data()[bo..bo + k * n],
            Layout::transposed(n),
            a_beta,
            &mut da[ao..ao + m * k],
            Layout::row_major(k),
        );
        let b_beta = if s.b_batched || i == 0 { T::zero() } else { T::one() };
        T::gemm(
            k,
            m,
            n,
            T::one(),
            &a.data()[ao..ao + m * k],
            Layout::transposed(k),
            g,
            Layout::row_major(n),
            b_beta,
            &mut db[bo..bo + k * n],
            Layout::row_major(n),
        );
    }
    Ok((
        Tensor::new(a.shape().to_vec(), da)?,
        Tensor::new(b.shape().to_vec(), db)?,
    ))
}

/// Swaps the last two axes.
pub fn transpose_last2<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let nd = x.ndim();
    if nd < 2 {
        return Err(TensorError::shape("transpose", "need at least 2 axes"));
    }
    let (r, c) = (x.shape()[nd - 2], x.shape()[nd - 1]);
    let batch = x.numel() / (r * c).max(1);
    let mut out = vec![T::zero(); x.numel()];
    let src = x.data();
    for b in 0..batch {
        let s = &src[b * r * c..(b + 1) * r * c];
        let d = &mut out[b * r * c..(b + 1) * r * c];
        // Blocked to keep both sides cache-resident.
        const BLK: usize = 32;
        for i0 in (0..r).step_by(BLK) {
            for j0 in (0..c).step_by(BLK) {
                for i in i0..(i0 + BLK).min(r) {
                    for j in j0..(j0 + BLK).min(c) {
                        d[j * r + i] = s[i * c + j];
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(shape, out)
}
