//! Recorded reverse-mode differentiation.
//!
//! A [`Tape`] owns every value computed during a forward pass together with the
//! operation that produced it. [`Tape::backward`] walks the record in reverse,
//! applying each operation's vector-Jacobian product, and adds the resulting
//! parameter gradients into a [`ParamStore`].
//!
//! ```
//! use voxgraph_tensor::{ParamStore, Tape, Tensor};
//!
//! let mut params = ParamStore::<f64>::new();
//! let w = params.add("w", Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap()).unwrap();
//! let mut tape = Tape::new();
//! let wv = tape.param(&params, w);
//! let r = tape.relu(wv);
//! let loss = tape.sum(r);
//! tape.backward(loss, &mut params).unwrap();
//! assert_eq!(params.get(w).grad.data(), &[0.0, 1.0]);
//! ```

use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::{self, conv, gather, matmul, reduce, shape, softmax};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf { param: Option<ParamId> },
    Conv3d { input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize },
    ConvTranspose3d { input: Var, kernel: Var, bias: Option<Var>, stride: usize },
    Relu(Var),
    LeakyRelu(Var, T),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    ScaleBy { scalar: Var, input: Var },
    Sum(Var),
    Mean(Var),
    SumAxes(Var, Vec<usize>),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>, usize),
    MulRows(Var, Var),
    SelectClass(Var, Arc<[usize]>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of leaf values (inputs and parameters) from one backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss with respect to a leaf, if it was reachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape whose parameter leaves do not require gradients. Used for
    /// frozen-weight evaluation.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad && self.grad_enabled)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Records the current value of a parameter; backward adds its gradient
    /// into the store entry with the same id.
    pub fn param(&mut self, params: &ParamStore<T>, id: ParamId) -> Var {
        let value = params.get(id).value.clone();
        let rg = self.grad_enabled;
        self.push(value, Op::Leaf { param: Some(id) }, rg)
    }

    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let out = conv::conv3d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::Conv3d { input, kernel, bias, stride, padding }, rg))
    }

    pub fn conv_transpose3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let out = conv::conv_transpose3d(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(out, Op::ConvTranspose3d { input, kernel, bias, stride }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = ops::leaky_relu(self.value(x), slope);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::LeakyRelu(x, slope), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax::softmax(self.value(x), axis)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax::log_softmax(self.value(x), axis)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::LogSoftmax(x, axis), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let out = matmul::transpose_last2(self.value(x))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = shape::concat(&values, axis)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", x.shape(), y.shape()),
            });
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |p, q| p + q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |p, q| p - q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |p, q| p * q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "div", |p, q| p / q)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn add_scalar(&mut self, x: Var, offset: T) -> Var {
        let out = self.value(x).map(|v| v + offset);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    /// Multiplies every element of `input` by the single value held in `scalar`.
    pub fn scale_by(&mut self, scalar: Var, input: Var) -> Result<Var> {
        let s = self.value(scalar).item().ok_or_else(|| {
            TensorError::shape("scale_by", format!("scalar operand has shape {:?}", self.shape(scalar)))
        })?;
        let out = self.value(input).map(|v| v * s);
        let rg = self.any_grad(&[scalar, input]);
        Ok(self.push(out, Op::ScaleBy { scalar, input }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.numel().max(1)).expect("element count fits");
        let out = Tensor::scalar(v.sum() / n);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Mean(x), rg)
    }

    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = reduce::sum_axes(self.value(x), axes)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SumAxes(x, axes.to_vec()), rg))
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let out = gather::gather_rows(self.value(x), &index)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GatherRows(x, index), rg))
    }

    pub fn scatter_add_rows(&mut self, x: Var, index: Arc<[usize]>, rows: usize) -> Result<Var> {
        let out = gather::scatter_add_rows(self.value(x), &index, rows)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::ScatterAddRows(x, index), rg))
    }

    pub fn segment_softmax(&mut self, scores: Var, segment: Arc<[usize]>, n_segments: usize) -> Result<Var> {
        let out = gather::segment_softmax(self.value(scores), &segment, n_segments)?;
        let rg = self.any_grad(&[scores]);
        Ok(self.push(out, Op::SegmentSoftmax(scores, segment, n_segments), rg))
    }

    pub fn mul_rows(&mut self, x: Var, weights: Var) -> Result<Var> {
        let out = gather::mul_rows(self.value(x), self.value(weights))?;
        let rg = self.any_grad(&[x, weights]);
        Ok(self.push(out, Op::MulRows(x, weights), rg))
    }

    pub fn select_class(&mut self, x: Var, classes: Arc<[usize]>) -> Result<Var> {
        let out = gather::select_class(self.value(x), &classes)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SelectClass(x, classes), rg))
    }

    /// Evaluates gradients of the single-element `loss` and adds parameter
    /// gradients into `params`. Calling it again accumulates a second time.
    pub fn backward(&self, loss: Var, params: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { param } = node.op {
                if let (Some(id), Some(g)) = (param, grads[i].as_ref()) {
                    params.get_mut(id).grad.add_assign(g)?;
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[v.0].requires_grad {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g)?,
            slot => *slot = Some(g),
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let zip_map = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            Tensor::from_fn(a.shape(), |k| f(g.data()[k], a.data()[k]))
        };
        match &node.op {
            Op::Leaf { .. } => {}
            &Op::Conv3d { input, kernel, bias, stride, padding } => {
                let need_x = self.requires_grad(input);
                let d = conv::conv3d_backward(self.value(input), self.value(kernel), stride, padding, g, need_x)?;
                if need_x {
                    self.accumulate(grads, input, d.input)?;
                }
                self.accumulate(grads, kernel, d.kernel)?;
                if let Some(b) = bias {
                    self.accumulate(grads, b, d.bias)?;
                }
            }
            &Op::ConvTranspose3d { input, kernel, bias, stride } => {
                let need_x = self.requires_grad(input);
                let d = conv::conv_transpose3d_backward(self.value(input), self.value(kernel), stride, g, need_x)?;
                if need_x {
                    self.accumulate(grads, input, d.input)?;
                }
                self.accumulate(grads, kernel, d.kernel)?;
                if let Some(b) = bias {
                    self.accumulate(grads, b, d.bias)?;
                }
            }
            &Op::Relu(x) => {
                let dx = zip_map(self.value(x), &|g, v| if v > T::zero() { g } else { T::zero() });
                self.accumulate(grads, x, dx)?;
            }
            &Op::LeakyRelu(x, slope) => {
                let dx = zip_map(self.value(x), &|g, v| if v > T::zero() { g } else { g * slope });
                self.accumulate(grads, x, dx)?;
            }
            &Op::Softmax(x, axis) => {
                let dx = softmax::softmax_backward(&node.value, g, axis);
                self.accumulate(grads, x, dx)?;
            }
            &Op::LogSoftmax(x, axis) => {
                let dx = softmax::log_softmax_backward(&node.value, g, axis);
                self.accumulate(grads, x, dx)?;
            }
            &Op::MatMul(a, b) => {
                let (da, db) = matmul::matmul_backward(self.value(a), self.value(b), g)?;
                self.accumulate(grads, a, da)?;
                self.accumulate(grads, b, db)?;
            }
            &Op::Transpose(x) => {
                self.accumulate(grads, x, matmul::transpose_last2(g)?)?;
            }
            &Op::Reshape(x) => {
                let dx = g.clone().reshape(self.shape(x))?;
                self.accumulate(grads, x, dx)?;
            }
            Op::Concat(parts, axis) => {
                let extents: Vec<usize> = parts.iter().map(|&p| self.shape(p)[*axis]).collect();
                for (&p, piece) in parts.iter().zip(shape::split(g, *axis, &extents)?) {
                    self.accumulate(grads, p, piece)?;
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.clone())?;
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone())?;
                self.accumulate(grads, b, g.map(|v| -v))?;
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, zip_map(self.value(b), &|g, q| g * q))?;
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, zip_map(self.value(a), &|g, p| g * p))?;
                }
            }
            &Op::Div(a, b) => {
                let bv = self.value(b);
                if self.requires_grad(a) {
                    self.accumulate(grads, a, zip_map(bv, &|g, q| g / q))?;
                }
                if self.requires_grad(b) {
                    let av = self.value(a);
                    let db = Tensor::from_fn(bv.shape(), |k| {
                        let q = bv.data()[k];
                        -g.data()[k] * av.data()[k] / (q * q)
                    });
                    self.accumulate(grads, b, db)?;
                }
            }
            &Op::Scale(x, factor) => {
                self.accumulate(grads, x, g.map(|v| v * factor))?;
            }
            &Op::AddScalar(x) => {
                self.accumulate(grads, x, g.clone())?;
            }
            &Op::ScaleBy { scalar, input } => {
                let s = self.value(scalar).item().expect("checked in forward");
                if self.requires_grad(input) {
                    self.accumulate(grads, input, g.map(|v| v * s))?;
                }
                if self.requires_grad(scalar) {
                    let ds = g.dot(self.value(input))?;
                    self.accumulate(grads, scalar, Tensor::full(self.shape(scalar), ds))?;
                }
            }
            &Op::Sum(x) => {
                let gv = g.item().expect("scalar");
                self.accumulate(grads, x, Tensor::full(self.shape(x), gv))?;
            }
            &Op::Mean(x) => {
                let n = T::from_usize(self.value(x).numel().max(1)).expect("element count fits");
                let gv = g.item().expect("scalar") / n;
                self.accumulate(grads, x, Tensor::full(self.shape(x), gv))?;
            }
            Op::SumAxes(x, axes) => {
                let dx = reduce::sum_axes_backward(self.shape(*x), axes, g)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::GatherRows(x, index) => {
                let rows = self.shape(*x)[0];
                let dx = gather::scatter_add_rows(g, index, rows)?;
                self.accumulate(grads, *x, dx)?;
            }
            Op::ScatterAddRows(x, index) => {
                self.accumulate(grads, *x, gather::gather_rows(g, index)?)?;
            }
            Op::SegmentSoftmax(x, segment, n) => {
                let dx = gather::segment_softmax_backward(&node.value, g, segment, *n);
                self.accumulate(grads, *x, dx)?;
            }
            &Op::MulRows(x, w) => {
                if self.requires_grad(x) {
                    self.accumulate(grads, x, gather::mul_rows(g, self.value(w))?)?;
                }
                if self.requires_grad(w) {
                    let xv = self.value(x);
                    let f = xv.shape()[1];
                    let dw = Tensor::from_fn(self.shape(w), |e| {
                        (0..f).map(|c| g.data()[e * f + c] * xv.data()[e * f + c]).sum()
                    });
                    self.accumulate(grads, w, dw)?;
                }
            }
            Op::SelectClass(x, classes) => {
                let dx = gather::select_class_backward(self.shape(*x), classes, g);
                self.accumulate(grads, *x, dx)?;
            }
        }
        Ok(())
    }
}
