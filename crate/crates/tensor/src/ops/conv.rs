//! 3D convolution kernels.
//!
//! Strided convolution lowers each batch item to a single GEMM over an
//! im2col buffer of shape `[cin·k³, D'·H'·W']`. The k=2/stride=2 transpose
//! convolution is a GEMM followed by a non-overlapping scatter.

use crate::element::{Element, Layout};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Resolved shapes of one conv3d call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 5 {
            return Err(TensorError::shape(
                "conv3d",
                format!("input must be [B,C,D,H,W], got {:?}", input),
            ));
        }
        if kernel.len() != 5 || kernel[2] != kernel[3] || kernel[3] != kernel[4] {
            return Err(TensorError::shape(
                "conv3d",
                format!("kernel must be [Cout,Cin,k,k,k], got {:?}", kernel),
            ));
        }
        if kernel[1] != input[1] {
            return Err(TensorError::shape(
                "conv3d",
                format!(
                    "input has {} channels but kernel expects {} (input {:?}, kernel {:?})",
                    input[1], kernel[1], input, kernel
                ),
            ));
        }
        let k = kernel[2];
        if k == 0 || stride == 0 {
            return Err(TensorError::invalid("conv3d", "kernel size and stride must be >= 1"));
        }
        let mut output = [0; 3];
        for axis in 0..3 {
            let padded = input[2 + axis] + 2 * padding;
            if padded < k {
                return Err(TensorError::shape(
                    "conv3d",
                    format!("padded extent {} smaller than kernel {}", padded, k),
                ));
            }
            output[axis] = (padded - k) / stride + 1;
        }
        Ok(ConvGeometry {
            batch: input[0],
            cin: input[1],
            cout: kernel[0],
            k,
            stride,
            padding,
            input: [input[2], input[3], input[4]],
            output,
        })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// 1×1×1, stride 1, no padding: the input itself is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.output[0], self.output[1], self.output[2]]
    }
}

/// Range of output indices `o` for which `o*stride + offset - pad` lies in `[0, extent)`.
fn valid_range(out_len: usize, stride: usize, offset: usize, pad: usize, extent: usize) -> (usize, usize) {
    // o*stride + offset >= pad
    let lo = if offset >= pad {
        0
    } else {
        (pad - offset).div_ceil(stride)
    };
    // o*stride + offset - pad <= extent - 1
    let hi = if extent + pad > offset {
        ((extent + pad - offset - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Element>(x: &[T], g: &ConvGeometry, col: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, p) = (g.k, g.stride, g.padding);
    let plane = oh * ow;
    let npix = od * plane;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &x[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            let (z0, z1) = valid_range(od, s, kz, p, d);
            for ky in 0..k {
                let (y0, y1) = valid_range(oh, s, ky, p, h);
                for kx in 0..k {
                    let (x0, x1) = valid_range(ow, s, kx, p, w);
                    let dst = &mut col[row * npix..(row + 1) * npix];
                    row += 1;
                    dst.fill(T::zero());
                    for oz in z0..z1 {
                        let iz = oz * s + kz - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let src = &xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let out = &mut dst[oz * plane + oy * ow..oz * plane + (oy + 1) * ow];
                            if s == 1 {
                                let ix0 = x0 + kx - p;
                                out[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                            } else {
                                for ox in x0..x1 {
                                    out[ox] = src[ox * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(col: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let [d, h, w] = g.input;
    let [od, oh, ow] = g.output;
    let (k, s, p) = (g.k, g.stride, g.padding);
    let plane = oh * ow;
    let npix = od * plane;
    let mut row = 0;
    for ci in 0..g.cin {
        let xc = &mut dx[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            let (z0, z1) = valid_range(od, s, kz, p, d);
            for ky in 0..k {
                let (y0, y1) = valid_range(oh, s, ky, p, h);
                for kx in 0..k {
                    let (x0, x1) = valid_range(ow, s, kx, p, w);
                    let src = &col[row * npix..(row + 1) * npix];
                    row += 1;
                    for oz in z0..z1 {
                        let iz = oz * s + kz - p;
                        for oy in y0..y1 {
                            let iy = oy * s + ky - p;
                            let dst = &mut xc[(iz * h + iy) * w..(iz * h + iy + 1) * w];
                            let inp = &src[oz * plane + oy * ow..oz * plane + (oy + 1) * ow];
                            for ox in x0..x1 {
                                dst[ox * s + kx - p] += inp[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_bias<T: Element>(bias: Option<&Tensor<T>>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(TensorError::shape(
                op,
                format!("bias must be [{}], got {:?}", channels, b.shape()),
            ));
        }
    }
    Ok(())
}

/// Cross-correlation of `input [B,Cin,D,H,W]` with `kernel [Cout,Cin,k,k,k]`.
pub fn conv3d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    check_bias(bias, g.cout, "conv3d")?;
    let (n_in, n_out, patch) = (g.cin * g.in_voxels(), g.cout * g.out_voxels(), g.patch());
    let npix = g.out_voxels();
    let mut out = vec![T::zero(); g.batch * n_out];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * npix]
    };
    for b in 0..g.batch {
        let x = &input.data()[b * n_in..(b + 1) * n_in];
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        let y = &mut out[b * n_out..(b + 1) * n_out];
        if let Some(bias) = bias {
            for (co, chunk) in y.chunks_mut(npix).enumerate() {
                chunk.fill(bias.data()[co]);
            }
        }
        T::gemm(
            g.cout,
            patch,
            npix,
            T::one(),
            kernel.data(),
            Layout::row_major(patch),
            cols,
            Layout::row_major(npix),
            if bias.is_some() { T::one() } else { T::zero() },
            y,
            Layout::row_major(npix),
        );
    }
    Tensor::new(g.output_shape(), out)
}

/// Gradients of [`conv3d`] given the upstream gradient `grad_out`.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv3d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    if grad_out.shape() != g.output_shape() {
        return Err(TensorError::shape(
            "conv3d_backward",
            format!("grad {:?} vs output {:?}", grad_out.shape(), g.output_shape()),
        ));
    }
    let (n_in, n_out, patch) = (g.cin * g.in_voxels(), g.cout * g.out_voxels(), g.patch());
    let npix = g.out_voxels();
    let mut dx = vec![T::zero(); if need_input_grad { input.numel() } else { 0 }];
    let mut dw = vec![T::zero(); kernel.numel()];
    let mut db = vec![T::zero(); g.cout];
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); patch * npix]
    };
    for b in 0..g.batch {
        let x = &input.data()[b * n_in..(b + 1) * n_in];
        let dy = &grad_out.data()[b * n_out..(b + 1) * n_out];
        for (co, chunk) in dy.chunks(npix).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        let cols: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(x, &g, &mut col);
            &col
        };
        // dW[co, K] += dY[co, P] · col[K, P]^T
        T::gemm(
            g.cout,
            npix,
            patch,
            T::one(),
            dy,
            Layout::row_major(npix),
            cols,
            Layout::transposed(npix),
            T::one(),
            &mut dw,
            Layout::row_major(patch),
        );
        if need_input_grad {
            let dxb = &mut dx[b * n_in..(b + 1) * n_in];
            if g.is_pointwise() {
                // dX[ci, P] = W^T[ci, co] · dY[co, P]
                T::gemm(
                    patch,
                    g.cout,
                    npix,
                    T::one(),
                    kernel.data(),
                    Layout::transposed(patch),
                    dy,
                    Layout::row_major(npix),
                    T::zero(),
                    dxb,
                    Layout::row_major(npix),
                );
            } else {
                T::gemm(
                    patch,
                    g.cout,
                    npix,
                    T::one(),
                    kernel.data(),
                    Layout::transposed(patch),
                    dy,
                    Layout::row_major(npix),
                    T::zero(),
                    &mut col,
                    Layout::row_major(npix),
                );
                col2im_add(&col, &g, dxb);
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(if need_input_grad { input.shape().to_vec() } else { vec![0] }, dx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

/// Upsampling transpose convolution restricted to kernel = stride = 2, no padding.
///
/// `input [B,Cin,D,H,W]`, `kernel [Cin,Cout,2,2,2]` → `[B,Cout,2D,2H,2W]`. Every
/// output voxel receives exactly one contribution per input channel.
pub fn conv_transpose3d<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
) -> Result<Tensor<T>> {
    let g = TransposeGeometry::new(input.shape(), kernel.shape(), stride)?;
    check_bias(bias, g.cout, "conv_transpose3d")?;
    let rows = g.cout * 8;
    let npix = g.in_voxels();
    let mut tmp = vec![T::zero(); rows * npix];
    let mut out = vec![T::zero(); g.batch * g.cout * npix * 8];
    for b in 0..g.batch {
        let x = &input.data()[b * g.cin * npix..(b + 1) * g.cin * npix];
        // tmp[(co,dz,dy,dx), P] = W^T · X
        T::gemm(
            rows,
            g.cin,
            npix,
            T::one(),
            kernel.data(),
            Layout::transposed(rows),
            x,
            Layout::row_major(npix),
            T::zero(),
            &mut tmp,
            Layout::row_major(npix),
        );
        let y = &mut out[b * g.cout * npix * 8..(b + 1) * g.cout * npix * 8];
        g.scatter(&tmp, y, bias.map(|t| t.data()));
    }
    Tensor::new(g.output_shape(), out)
}

pub fn conv_transpose3d_backward<T: Element>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
    need_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = TransposeGeometry::new(input.shape(), kernel.shape(), stride)?;
    if grad_out.shape() != g.output_shape() {
        return Err(TensorError::shape(
            "conv_transpose3d_backward",
            format!("grad {:?} vs output {:?}", grad_out.shape(), g.output_shape()),
        ));
    }
    let rows = g.cout * 8;
    let npix = g.in_voxels();
    let mut dtmp = vec![T::zero(); rows * npix];
    let mut dx = vec![T::zero(); if need_input_grad { input.numel() } else { 0 }];
    let mut dw = vec![T::zero(); kernel.numel()];
    let mut db = vec![T::zero(); g.cout];
    let per_out = g.cout * npix * 8;
    for b in 0..g.batch {
        let x = &input.data()[b * g.cin * npix..(b + 1) * g.cin * npix];
        let dy = &grad_out.data()[b * per_out..(b + 1) * per_out];
        for (co, chunk) in dy.chunks(npix * 8).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        g.gather(dy, &mut dtmp);
        // dW[ci, r] += X[ci, P] · dtmp[r, P]^T
        T::gemm(
            g.cin,
            npix,
            rows,
            T::one(),
            x,
            Layout::row_major(npix),
            &dtmp,
            Layout::transposed(npix),
            T::one(),
            &mut dw,
            Layout::row_major(rows),
        );
        if need_input_grad {
            // dX[ci, P] = W[ci, r] · dtmp[r, P]
            T::gemm(
                g.cin,
                rows,
                npix,
                T::one(),
                kernel.data(),
                Layout::row_major(rows),
                &dtmp,
                Layout::row_major(npix),
                T::zero(),
                &mut dx[b * g.cin * npix..(b + 1) * g.cin * npix],
                Layout::row_major(npix),
            );
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(if need_input_grad { input.shape().to_vec() } else { vec![0] }, dx)?,
        kernel: Tensor::new(kernel.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.cout], db)?,
    })
}

struct TransposeGeometry {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
}

impl TransposeGeometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize) -> Result<Self> {
        if input.len() != 5 {
            return Err(TensorError::shape(
                "conv_transpose3d",
                format!("input must be [B,C,D,H,W], got {:?}", input),
            ));
        }
        if kernel.len() != 5 {
            return Err(TensorError::shape(
                "conv_transpose3d",
                format!("kernel must be [Cin,Cout,k,k,k], got {:?}", kernel),
            ));
        }
        if stride != 2 || kernel[2..] != [2, 2, 2] {
            return Err(TensorError::Unsupported {
                op: "conv_transpose3d",
                detail: format!(
                    "only kernel = stride = 2 is supported, got kernel {:?} stride {}",
                    &kernel[2..],
                    stride
                ),
            });
        }
        if kernel[0] != input[1] {
            return Err(TensorError::shape(
                "conv_transpose3d",
                format!("input has {} channels but kernel expects {}", input[1], kernel[0]),
            ));
        }
        Ok(TransposeGeometry {
            batch: input[0],
            cin: input[1],
            cout: kernel[1],
            input: [input[2], input[3], input[4]],
        })
    }

    fn in_voxels(&self) -> usize {
        self.input.iter().product()
    }

    fn output_shape(&self) -> Vec<usize> {
        let [d, h, w] = self.input;
        vec![self.batch, self.cout, 2 * d, 2 * h, 2 * w]
    }

    /// `y[co, 2z+a, 2y+b, 2x+c] = tmp[co*8 + 4a+2b+c, (z,y,x)] + bias[co]`.
    fn scatter<T: Element>(&self, tmp: &[T], y: &mut [T], bias: Option<&[T]>) {
        let [d, h, w] = self.input;
        let npix = d * h * w;
        let (oh, ow) = (2 * h, 2 * w);
        for co in 0..self.cout {
            let b = bias.map_or(T::zero(), |bias| bias[co]);
            let yc = &mut y[co * npix * 8..(co + 1) * npix * 8];
            for off in 0..8 {
                let (a, bb, c) = (off >> 2, (off >> 1) & 1, off & 1);
                let src = &tmp[(co * 8 + off) * npix..(co * 8 + off + 1) * npix];
                for z in 0..d {
                    for yy in 0..h {
                        let row = ((2 * z + a) * oh + 2 * yy + bb) * ow;
                        let s = &src[(z * h + yy) * w..(z * h + yy + 1) * w];
                        for (x, &v) in s.iter().enumerate() {
                            yc[row + 2 * x + c] = v + b;
                        }
                    }
                }
            }
        }
    }

    fn gather<T: Element>(&self, dy: &[T], tmp: &mut [T]) {
        let [d, h, w] = self.input;
        let npix = d * h * w;
        let (oh, ow) = (2 * h, 2 * w);
        for co in 0..self.cout {
            let yc = &dy[co * npix * 8..(co + 1) * npix * 8];
            for off in 0..8 {
                let (a, bb, c) = (off >> 2, (off >> 1) & 1, off & 1);
                let dst = &mut tmp[(co * 8 + off) * npix..(co * 8 + off + 1) * npix];
                for z in 0..d {
                    for yy in 0..h {
                        let row = ((2 * z + a) * oh + 2 * yy + bb) * ow;
                        let s = &mut dst[(z * h + yy) * w..(z * h + yy + 1) * w];
                        for (x, v) in s.iter_mut().enumerate() {
                            *v = yc[row + 2 * x + c];
                        }
                    }
                }
            }
        }
    }
}
