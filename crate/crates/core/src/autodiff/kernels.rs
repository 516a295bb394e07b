//! Raw numeric kernels on flat row-major buffers.
//!
//! Everything here is single-threaded and has a fixed accumulation order, so
//! results are bitwise reproducible.

use super::tensor::{numel, Scalar};

/// `out[m,n] = a[m,k] * b[k,n]`
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out[m,n] = a[m,k] * b[n,k]^T`
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[m,n] = a[k,m]^T * b[k,n]`
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // Eight independent partial sums let the compiler keep lanes busy.
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let base = c * 8;
        for l in 0..8 {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = T::zero();
    for idx in chunks * 8..a.len() {
        tail += a[idx] * b[idx];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// Numpy-style broadcast of two shapes, aligned on the trailing dimension.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid over `out_shape`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast output.
fn for_each_broadcast(
    a_shape: &[usize],
    b_shape: &[usize],
    out_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out_shape);
    if a_shape == b_shape {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    op: impl Fn(T, T) -> T,
) -> Vec<T> {
    let mut out = vec![T::zero(); numel(out_shape)];
    for_each_broadcast(a_shape, b_shape, out_shape, |o, ia, ib| {
        out[o] = op(a[ia], b[ib]);
    });
    out
}

/// Gradient of a broadcast binary op with respect to both operands.
///
/// `da(a, b, g)` and `db(a, b, g)` give the local contribution of one output
/// element; contributions are summed back over broadcast axes.
#[allow(clippy::too_many_arguments)]
pub fn broadcast_binary_backward<T: Scalar>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    grad: &[T],
    need: (bool, bool),
    da: impl Fn(T, T, T) -> T,
    db: impl Fn(T, T, T) -> T,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut ga = need.0.then(|| vec![T::zero(); a.len()]);
    let mut gb = need.1.then(|| vec![T::zero(); b.len()]);
    for_each_broadcast(a_shape, b_shape, out_shape, |o, ia, ib| {
        let g = grad[o];
        if let Some(ga) = ga.as_mut() {
            ga[ia] += da(a[ia], b[ib], g);
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += db(a[ia], b[ib], g);
        }
    });
    (ga, gb)
}

/// Geometry of a 2-D convolution over `[batch, channels, height, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Output extent of a convolution along one axis, `None` when the padded
/// input is smaller than the kernel.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Lowers the input to a `[C*kh*kw, B*oh*ow]` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.col_cols();
    let mut out = vec![T::zero(); g.col_rows() * cols];
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let src = &x[(b * g.channels + c) * g.height * g.width..];
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw < 0 || iw >= g.width as isize {
                                continue;
                            }
                            dst[b * plane + oh * g.out_w + ow] = src[ih * g.width + iw as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Scalar>(cols_grad: &[T], g: &ConvGeometry) -> Vec<T> {
    let cols = g.col_cols();
    let mut dx = vec![T::zero(); g.batch * g.channels * g.height * g.width];
    let plane = g.out_h * g.out_w;
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols_grad[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let base = (b * g.channels + c) * g.height * g.width;
                    for oh in 0..g.out_h {
                        let ih = (oh * g.stride + ki) as isize - g.padding as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let ih = ih as usize;
                        for ow in 0..g.out_w {
                            let iw = (ow * g.stride + kj) as isize - g.padding as isize;
                            if iw < 0 || iw >= g.width as isize {
                                continue;
                            }
                            dx[base + ih * g.width + iw as usize] +=
                                src[b * plane + oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
    dx
}
