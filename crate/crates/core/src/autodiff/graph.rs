use super::kernels::{self, ConvGeometry};
use super::tensor::{numel, Scalar, Tensor};
use super::AutodiffError;

/// Operation tag recorded on every non-leaf node.
///
/// The backward rule for each variant lives in [`Graph::backward`]; the match
/// there is exhaustive, so a new tag cannot be added without one.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Abs,
    /// Sum over one axis (removed from the shape) or over everything.
    Sum { axis: Option<usize> },
    /// Mean over one axis (removed from the shape) or over everything.
    Mean { axis: Option<usize> },
    Reshape { shape: Vec<usize> },
    /// `[m,k] x [k,n]`
    MatMul,
    /// Input `[B,C,H,W]`, weight `[O,C,kh,kw]`, no bias.
    Conv2d { stride: usize, padding: usize },
    /// `[B,C,H,W] -> [B,C]`
    AdaptiveAvgPool,
    /// Gathers rows along axis 0.
    IndexSelect { indices: Vec<usize> },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::Abs => "abs",
            OpKind::Sum { .. } => "sum",
            OpKind::Mean { .. } => "mean",
            OpKind::Reshape { .. } => "reshape",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::AdaptiveAvgPool => "adaptive_avg_pool",
            OpKind::IndexSelect { .. } => "index_select",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
            OpKind::Conv2d { .. } => 2,
            _ => 1,
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Saved<T> {
    None,
    Cols { cols: Vec<T>, geom: ConvGeometry },
}

struct Node<T> {
    value: Tensor<T>,
    op: Option<OpKind>,
    parents: Vec<Var>,
    saved: Saved<T>,
    trainable: bool,
    requires_grad: bool,
}

/// Arena of tensors linked by the operations that produced them.
///
/// Nodes are appended in creation order, so the arena order is already a
/// topological order and backward simply walks it in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Trainable leaves receive gradients from [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(Node {
            value,
            op: None,
            parents: Vec::new(),
            saved: Saved::None,
            trainable,
            requires_grad: trainable,
        })
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> Option<&OpKind> {
        self.nodes[v.0].op.as_ref()
    }

    pub fn is_trainable(&self, v: Var) -> bool {
        self.nodes[v.0].trainable
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone())
                .expect("gradient buffer mirrors value shape")
        })
    }

    /// Clears gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
        self.backward_done = false;
    }

    /// Smallest absolute input seen by any `relu` or `abs` node.
    ///
    /// Finite-difference checks are only meaningful when this is well above
    /// the step size.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if matches!(node.op, Some(OpKind::Relu) | Some(OpKind::Abs)) {
                for v in self.nodes[node.parents[0].0].value.data() {
                    margin = margin.min(v.as_f64().abs());
                }
            }
        }
        margin
    }

    /// Records `op` applied to `inputs` and returns the output node.
    pub fn forward_op(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var, AutodiffError> {
        if inputs.len() != op.arity() {
            return Err(AutodiffError::Arity {
                op: op.name(),
                expected: op.arity(),
                got: inputs.len(),
            });
        }
        let (value, saved) = self.eval(&op, inputs)?;
        let requires_grad = inputs.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(Node {
            value,
            op: Some(op),
            parents: inputs.to_vec(),
            saved,
            trainable: false,
            requires_grad,
        }))
    }

    fn eval(&self, op: &OpKind, inputs: &[Var]) -> Result<(Tensor<T>, Saved<T>), AutodiffError> {
        let a = &self.nodes[inputs[0].0].value;
        let unary = |f: &dyn Fn(T) -> T| {
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
        };
        let out = match op {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let b = &self.nodes[inputs[1].0].value;
                let shape = kernels::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
                    AutodiffError::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape().to_vec(),
                        rhs: b.shape().to_vec(),
                    }
                })?;
                let f: fn(T, T) -> T = match op {
                    OpKind::Add => |x, y| x + y,
                    OpKind::Sub => |x, y| x - y,
                    OpKind::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                let data = kernels::broadcast_binary(a.data(), a.shape(), b.data(), b.shape(), &shape, f);
                Tensor::new(shape, data)?
            }
            OpKind::Relu => unary(&|v| if v > T::zero() { v } else { T::zero() })?,
            OpKind::Exp => unary(&|v| v.exp())?,
            OpKind::Abs => unary(&|v| v.abs())?,
            OpKind::Sum { axis } | OpKind::Mean { axis } => {
                let mean = matches!(op, OpKind::Mean { .. });
                match axis {
                    None => {
                        let s: T = a.data().iter().copied().sum();
                        let n = T::of(a.numel() as f64);
                        Tensor::scalar(if mean { s / n } else { s })
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(a.shape(), *ax, op.name())?;
                        let mut out = vec![T::zero(); outer * inner];
                        for o in 0..outer {
                            for l in 0..len {
                                let src = &a.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                    *d += s;
                                }
                            }
                        }
                        if mean {
                            let n = T::of(len as f64);
                            out.iter_mut().for_each(|v| *v = *v / n);
                        }
                        let mut shape = a.shape().to_vec();
                        shape.remove(*ax);
                        Tensor::new(shape, out)?
                    }
                }
            }
            OpKind::Reshape { shape } => {
                if numel(shape) != a.numel() {
                    return Err(AutodiffError::ShapeMismatch {
                        op: op.name(),
                        lhs: a.shape().to_vec(),
                        rhs: shape.clone(),
                    });
                }
                Tensor::new(shape.clone(), a.data().to_vec())?
            }
            OpKind::MatMul => {
                let b = &self.nodes[inputs[1].0].value;
                let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
                Tensor::new(vec![m, n], kernels::matmul_nn(a.data(), b.data(), m, k, n))?
            }
            OpKind::Conv2d { stride, padding } => {
                let w = &self.nodes[inputs[1].0].value;
                let geom = conv_geometry(a.shape(), w.shape(), *stride, *padding)?;
                let cols = kernels::im2col(a.data(), &geom);
                let out_c = w.shape()[0];
                let mat = kernels::matmul_nn(w.data(), &cols, out_c, geom.col_rows(), geom.col_cols());
                // [O, B*P] -> [B, O, P]
                let plane = geom.out_h * geom.out_w;
                let mut out = vec![T::zero(); mat.len()];
                for o in 0..out_c {
                    for b in 0..geom.batch {
                        let src = &mat[o * geom.col_cols() + b * plane..][..plane];
                        out[(b * out_c + o) * plane..][..plane].copy_from_slice(src);
                    }
                }
                let value = Tensor::new(vec![geom.batch, out_c, geom.out_h, geom.out_w], out)?;
                return Ok((value, Saved::Cols { cols, geom }));
            }
            OpKind::AdaptiveAvgPool => {
                if a.rank() != 4 {
                    return Err(AutodiffError::Rank {
                        op: op.name(),
                        expected: 4,
                        shape: a.shape().to_vec(),
                    });
                }
                let (b, c, plane) = (a.shape()[0], a.shape()[1], a.shape()[2] * a.shape()[3]);
                let n = T::of(plane as f64);
                let data = a
                    .data()
                    .chunks(plane)
                    .map(|ch| ch.iter().copied().sum::<T>() / n)
                    .collect();
                Tensor::new(vec![b, c], data)?
            }
            OpKind::IndexSelect { indices } => {
                if a.rank() == 0 {
                    return Err(AutodiffError::Rank {
                        op: op.name(),
                        expected: 1,
                        shape: Vec::new(),
                    });
                }
                let rows = a.shape()[0];
                let row_len = a.numel() / rows.max(1);
                let mut data = Vec::with_capacity(indices.len() * row_len);
                for &i in indices {
                    if i >= rows {
                        return Err(AutodiffError::IndexOutOfRange { index: i, len: rows });
                    }
                    data.extend_from_slice(&a.data()[i * row_len..(i + 1) * row_len]);
                }
                let mut shape = a.shape().to_vec();
                shape[0] = indices.len();
                Tensor::new(shape, data)?
            }
        };
        Ok((out, Saved::None))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    ///
    /// Afterwards every trainable leaf that the loss depends on holds
    /// `dLoss/dLeaf`. A second call requires [`Graph::reset_grads`] first.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        if self.backward_done {
            return Err(AutodiffError::BackwardTwice);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad || self.nodes[id].op.is_none() {
                continue;
            }
            let Some(grad) = self.grads[id].take() else {
                continue;
            };
            let contributions = self.local_backward(id, &grad);
            self.grads[id] = Some(grad);
            let parents = self.nodes[id].parents.clone();
            for (p, contrib) in parents.into_iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                match &mut self.grads[p.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn local_backward(&self, id: usize, grad: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[id];
        let op = node.op.as_ref().expect("non-leaf");
        let need: Vec<bool> = node.parents.iter().map(|p| self.nodes[p.0].requires_grad).collect();
        let a = &self.nodes[node.parents[0].0].value;
        let out_shape = node.value.shape();
        let unary = |f: &dyn Fn(T, T, T) -> T| -> Vec<Option<Vec<T>>> {
            // f(input, output, upstream)
            vec![Some(
                a.data()
                    .iter()
                    .zip(node.value.data())
                    .zip(grad)
                    .map(|((&x, &y), &g)| f(x, y, g))
                    .collect(),
            )]
        };
        match op {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
                let b = &self.nodes[node.parents[1].0].value;
                let need = (need[0], need[1]);
                let (ga, gb) = match op {
                    OpKind::Add => kernels::broadcast_binary_backward(
                        a.data(), a.shape(), b.data(), b.shape(), out_shape, grad, need,
                        |_, _, g| g,
                        |_, _, g| g,
                    ),
                    OpKind::Sub => kernels::broadcast_binary_backward(
                        a.data(), a.shape(), b.data(), b.shape(), out_shape, grad, need,
                        |_, _, g| g,
                        |_, _, g| -g,
                    ),
                    OpKind::Mul => kernels::broadcast_binary_backward(
                        a.data(), a.shape(), b.data(), b.shape(), out_shape, grad, need,
                        |_, y, g| g * y,
                        |x, _, g| g * x,
                    ),
                    _ => kernels::broadcast_binary_backward(
                        a.data(), a.shape(), b.data(), b.shape(), out_shape, grad, need,
                        |_, y, g| g / y,
                        |x, y, g| -g * x / (y * y),
                    ),
                };
                vec![ga, gb]
            }
            OpKind::Relu => unary(&|x, _, g| if x > T::zero() { g } else { T::zero() }),
            OpKind::Exp => unary(&|_, y, g| g * y),
            OpKind::Abs => unary(&|x, _, g| {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            }),
            OpKind::Sum { axis } | OpKind::Mean { axis } => {
                let mean = matches!(op, OpKind::Mean { .. });
                match axis {
                    None => {
                        let n = T::of(a.numel() as f64);
                        let g = if mean { grad[0] / n } else { grad[0] };
                        vec![Some(vec![g; a.numel()])]
                    }
                    Some(ax) => {
                        let (outer, len, inner) =
                            axis_split(a.shape(), *ax, "sum").expect("validated in forward");
                        let scale = if mean { T::one() / T::of(len as f64) } else { T::one() };
                        let mut out = vec![T::zero(); a.numel()];
                        for o in 0..outer {
                            let src = &grad[o * inner..(o + 1) * inner];
                            for l in 0..len {
                                let dst = &mut out[(o * len + l) * inner..(o * len + l + 1) * inner];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d = if mean { s * scale } else { s };
                                }
                            }
                        }
                        vec![Some(out)]
                    }
                }
            }
            OpKind::Reshape { .. } => vec![Some(grad.to_vec())],
            OpKind::MatMul => {
                let b = &self.nodes[node.parents[1].0].value;
                let (m, k, n) = matmul_dims(a.shape(), b.shape()).expect("validated in forward");
                let ga = need[0].then(|| kernels::matmul_nt(grad, b.data(), m, n, k));
                let gb = need[1].then(|| kernels::matmul_tn(a.data(), grad, k, m, n));
                vec![ga, gb]
            }
            OpKind::Conv2d { .. } => {
                let Saved::Cols { cols, geom } = &node.saved else {
                    unreachable!("conv2d saves its patch matrix")
                };
                let w = &self.nodes[node.parents[1].0].value;
                let out_c = w.shape()[0];
                let plane = geom.out_h * geom.out_w;
                // [B, O, P] -> [O, B*P]
                let mut gmat = vec![T::zero(); grad.len()];
                for o in 0..out_c {
                    for b in 0..geom.batch {
                        gmat[o * geom.col_cols() + b * plane..][..plane]
                            .copy_from_slice(&grad[(b * out_c + o) * plane..][..plane]);
                    }
                }
                let gw = need[1].then(|| {
                    kernels::matmul_nt(&gmat, cols, out_c, geom.col_cols(), geom.col_rows())
                });
                let gx = need[0].then(|| {
                    let gcols =
                        kernels::matmul_tn(w.data(), &gmat, geom.col_rows(), out_c, geom.col_cols());
                    kernels::col2im(&gcols, geom)
                });
                vec![gx, gw]
            }
            OpKind::AdaptiveAvgPool => {
                let plane = a.shape()[2] * a.shape()[3];
                let n = T::of(plane as f64);
                let mut out = Vec::with_capacity(a.numel());
                for &g in grad {
                    out.extend(std::iter::repeat_n(g / n, plane));
                }
                vec![Some(out)]
            }
            OpKind::IndexSelect { indices } => {
                let rows = a.shape()[0];
                let row_len = a.numel() / rows.max(1);
                let mut out = vec![T::zero(); a.numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &s) in out[i * row_len..(i + 1) * row_len]
                        .iter_mut()
                        .zip(&grad[r * row_len..(r + 1) * row_len])
                    {
                        *d += s;
                    }
                }
                vec![Some(out)]
            }
        }
    }

    // Convenience wrappers over `forward_op`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Mul, &[a, b])
    }

    /// Elementwise division. Zero denominators are not guarded.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Div, &[a, b])
    }

    /// Multiplies by a constant scalar.
    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var, AutodiffError> {
        let c = self.scalar(factor);
        self.mul(a, c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Exp, &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Abs, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Sum { axis: None }, &[a])
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Sum { axis: Some(axis) }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Mean { axis: None }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Mean { axis: Some(axis) }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Reshape { shape }, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::MatMul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::Conv2d { stride, padding }, &[x, w])
    }

    pub fn adaptive_avg_pool(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::AdaptiveAvgPool, &[x])
    }

    pub fn index_select(&mut self, a: Var, indices: Vec<usize>) -> Result<Var, AutodiffError> {
        self.forward_op(OpKind::IndexSelect { indices }, &[a])
    }
}

fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize), AutodiffError> {
    if axis >= shape.len() {
        return Err(AutodiffError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize), AutodiffError> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

fn conv_geometry(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<ConvGeometry, AutodiffError> {
    if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    let out_h = kernels::conv_out_extent(x[2], w[2], stride, padding);
    let out_w = kernels::conv_out_extent(x[3], w[3], stride, padding);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(AutodiffError::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    };
    Ok(ConvGeometry {
        batch: x[0],
        channels: x[1],
        height: x[2],
        width: x[3],
        kernel_h: w[2],
        kernel_w: w[3],
        stride,
        padding,
        out_h,
        out_w,
    })
}
