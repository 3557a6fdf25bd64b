use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeometry, Layout};
use crate::tensor::{broadcast_shapes, for_each_broadcast, numel, strides, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sigmoid,
    Softplus,
    Sqrt,
    Square,
    Scale(f64),
    AddScalar(f64),
    MaxConst(f64),
    LeakyRelu(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    NormLast(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeometry },
    Conv2dTranspose { g: Var, w: Var, geom: ConvGeometry },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Binary(_, a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Unary(_, x)
            | Op::Transpose(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis { x, .. }
            | Op::NormLast(x)
            | Op::Reshape(x)
            | Op::BroadcastTo(x)
            | Op::Slice { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Conv2dTranspose { g, w, .. } => vec![*g, *w],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of tensor operations for reverse-mode differentiation.
///
/// Every node's parents have strictly smaller ids, so a single reverse sweep
/// over the node list is a valid topological traversal.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of leaf variables produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when it is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Gradient of a leaf; zeros when the leaf does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        match self.grads[v.0].take() {
            Some(g) => Tensor::from_parts(self.shapes[v.0].clone(), g),
            None => Tensor::zeros(self.shapes[v.0].clone()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node; previously issued vars become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Var(id)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownVar(v.0))
        }
    }

    fn record(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    // ---- elementwise binary (broadcasting) -------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Pow => "pow",
            Binary::Max => "maximum",
        };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shapes(name, ta.shape(), tb.shape())?;
        let mut out = vec![0.0; numel(&shape)];
        let (da, db) = (ta.data(), tb.data());
        let mut domain_error = None;
        for_each_broadcast(&shape, ta.shape(), tb.shape(), |o, i, j| {
            let (x, y) = (da[i], db[j]);
            out[o] = match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
                Binary::Pow => {
                    if x < 0.0 && y.fract() != 0.0 && domain_error.is_none() {
                        domain_error = Some(TensorError::Domain { base: x, exponent: y });
                    }
                    x.powf(y)
                }
                Binary::Max => {
                    if x >= y {
                        x
                    } else {
                        y
                    }
                }
            };
        });
        if let Some(e) = domain_error {
            return Err(e);
        }
        Ok(self.record(Tensor::from_parts(shape, out), Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `base^exponent`; a negative base needs an integer exponent.
    pub fn pow(&mut self, base: Var, exponent: Var) -> Result<Var> {
        self.binary(Binary::Pow, base, exponent)
    }

    /// Elementwise maximum; on ties the gradient flows to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.0].value;
        let value = match kind {
            Unary::Neg => t.map(|v| -v),
            Unary::Sin => t.map(f64::sin),
            Unary::Cos => t.map(f64::cos),
            Unary::Exp => t.map(f64::exp),
            Unary::Log => t.map(f64::ln),
            Unary::Sigmoid => t.map(sigmoid),
            Unary::Softplus => t.map(softplus),
            Unary::Sqrt => t.map(f64::sqrt),
            Unary::Square => t.map(|v| v * v),
            Unary::Scale(c) => t.map(|v| v * c),
            Unary::AddScalar(c) => t.map(|v| v + c),
            Unary::MaxConst(c) => t.map(|v| if v >= c { v } else { c }),
            Unary::LeakyRelu(s) => t.map(|v| if v > 0.0 { v } else { s * v }),
        };
        Ok(self.record(value, Op::Unary(kind, x)))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sin, x)
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Cos, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Softplus, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    /// `max(x, c)`; at `x == c` the gradient flows to `x`.
    pub fn max_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::MaxConst(c), x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    /// Elementwise product with a non-differentiable constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let c = self.constant(c);
        self.mul(x, c)
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s = self.nodes[x.0].value.sum();
        Ok(self.record(Tensor::scalar(s), Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.0].value;
        if t.numel() == 0 {
            return Err(TensorError::InvalidArgument { op: "mean", msg: "empty tensor".into() });
        }
        let m = t.sum() / t.numel() as f64;
        Ok(self.record(Tensor::scalar(m), Op::Mean(x)))
    }

    /// Sum over one axis, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.0].value;
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * inner];
        let d = t.data();
        for o in 0..outer {
            for k in 0..n {
                let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        Ok(self.record(Tensor::from_parts(out_shape, out), Op::SumAxis { x, axis }))
    }

    /// Euclidean norm over the last axis, kept with extent 1.
    pub fn norm_last(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.0].value;
        let shape = t.shape().to_vec();
        let Some(&k) = shape.last() else {
            return Err(TensorError::InvalidArgument {
                op: "norm",
                msg: "vector norm needs at least one axis".into(),
            });
        };
        let rows = t.numel() / k.max(1);
        let out: Vec<f64> = (0..rows)
            .map(|r| t.data()[r * k..(r + 1) * k].iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = 1;
        Ok(self.record(Tensor::from_parts(out_shape, out), Op::NormLast(x)))
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let value = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        Ok(self.record(value, Op::Reshape(x)))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.0].value;
        let target = broadcast_shapes("broadcast", t.shape(), shape)?;
        if target != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let mut out = vec![0.0; numel(shape)];
        let d = t.data();
        for_each_broadcast(shape, t.shape(), shape, |o, i, _| out[o] = d[i]);
        Ok(self.record(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastTo(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.0].value;
        let [r, c] = matrix_dims("transpose", t.shape())?;
        let d = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(self.record(Tensor::from_parts(vec![c, r], out), Op::Transpose(x)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::InvalidArgument { op: "concat", msg: "no inputs".into() });
        };
        for &p in parts {
            self.check(p)?;
        }
        let base = self.nodes[first.0].value.shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.nodes[p.0].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        Ok(self.record(Tensor::from_parts(shape, out), Op::Concat { parts: parts.to_vec(), axis }))
    }

    /// Half-open slice `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.check(x)?;
        let t = &self.nodes[x.0].value;
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{end} on axis {axis} invalid for shape {shape:?}"),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.record(Tensor::from_parts(out_shape, out), Op::Slice { x, axis, start }))
    }

    // ---- linear algebra ---------------------------------------------------

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let [m, k] = matrix_dims("matmul", ta.shape()).map_err(|_| mismatch())?;
        let [k2, n] = matrix_dims("matmul", tb.shape()).map_err(|_| mismatch())?;
        if k != k2 {
            return Err(mismatch());
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(ta.data(), Layout::new(m, k), tb.data(), Layout::new(k, n), &mut out, 0.0);
        Ok(self.record(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    fn conv_geometry(
        &self,
        op: &'static str,
        input_shape: &[usize],
        w: Var,
        stride: usize,
        pad: usize,
    ) -> Result<ConvGeometry> {
        let ws = self.nodes[w.0].value.shape();
        let bad = || TensorError::ShapeMismatch {
            op,
            lhs: input_shape.to_vec(),
            rhs: ws.to_vec(),
        };
        if input_shape.len() != 4 || ws.len() != 4 || ws[1] != input_shape[1] || stride == 0 {
            return Err(bad());
        }
        if input_shape[2] + 2 * pad < ws[2] || input_shape[3] + 2 * pad < ws[3] {
            return Err(bad());
        }
        Ok(ConvGeometry {
            batch: input_shape[0],
            in_channels: input_shape[1],
            out_channels: ws[0],
            height: input_shape[2],
            width: input_shape[3],
            kernel_h: ws[2],
            kernel_w: ws[3],
            stride,
            pad,
        })
    }

    /// 2-D cross-correlation of NCHW input `x` with OIHW weights `w`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        let geom = self.conv_geometry("conv2d", self.nodes[x.0].value.shape(), w, stride, pad)?;
        let out = kernels::conv2d_forward(
            &geom,
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
        );
        let shape = vec![geom.batch, geom.out_channels, geom.out_height(), geom.out_width()];
        Ok(self.record(Tensor::from_parts(shape, out), Op::Conv2d { x, w, geom }))
    }

    /// Transposed convolution: the input-gradient of [`Tape::conv2d`] as a
    /// differentiable op. `g` has the conv output shape; the result has the
    /// conv input shape `[batch, in_channels, height, width]`.
    pub fn conv2d_transpose(
        &mut self,
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        self.check(g)?;
        self.check(w)?;
        let gs = self.nodes[g.0].value.shape().to_vec();
        let ws = self.nodes[w.0].value.shape().to_vec();
        if gs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::ShapeMismatch { op: "conv2d_transpose", lhs: gs, rhs: ws });
        }
        let input_shape = [gs[0], ws[1], height, width];
        let geom = self.conv_geometry("conv2d_transpose", &input_shape, w, stride, pad)?;
        if gs[1] != geom.out_channels || gs[2] != geom.out_height() || gs[3] != geom.out_width() {
            return Err(TensorError::ShapeMismatch { op: "conv2d_transpose", lhs: gs, rhs: ws });
        }
        let out = kernels::conv2d_input_grad(
            &geom,
            self.nodes[g.0].value.data(),
            self.nodes[w.0].value.data(),
        );
        Ok(self.record(Tensor::from_parts(input_shape.to_vec(), out), Op::Conv2dTranspose { g, w, geom }))
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every reachable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let t = &self.nodes[loss.0].value;
        if t.numel() != 1 {
            return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
        }
        self.backward_with_seed(loss, Tensor::from_parts(t.shape().to_vec(), vec![1.0]))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) to the leaves.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.check(output)?;
        let out_shape = self.nodes[output.0].value.shape();
        if seed.shape() != out_shape {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                lhs: out_shape.to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let n = output.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.into_data());
        }
        for id in (0..n).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        let shapes = self.nodes[..n].iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => self.back_binary(*kind, *a, *b, out, g, grads),
            Op::Unary(kind, x) => {
                let xv = self.nodes[x.0].value.data();
                let ov = out.data();
                self.accumulate(*x, grads, |dx| {
                    for i in 0..dx.len() {
                        let d = match *kind {
                            Unary::Neg => -1.0,
                            Unary::Sin => xv[i].cos(),
                            Unary::Cos => -xv[i].sin(),
                            Unary::Exp => ov[i],
                            Unary::Log => 1.0 / xv[i],
                            Unary::Sigmoid => ov[i] * (1.0 - ov[i]),
                            Unary::Softplus => sigmoid(xv[i]),
                            Unary::Sqrt => 0.5 / ov[i],
                            Unary::Square => 2.0 * xv[i],
                            Unary::Scale(c) => c,
                            Unary::AddScalar(_) => 1.0,
                            Unary::MaxConst(c) => {
                                if xv[i] >= c {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::LeakyRelu(s) => {
                                if xv[i] > 0.0 {
                                    1.0
                                } else {
                                    s
                                }
                            }
                        };
                        dx[i] += g[i] * d;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                self.accumulate(*a, grads, |da| {
                    kernels::gemm(g, Layout::new(m, n), tb.data(), Layout::new(k, n).t(), da, 1.0)
                });
                self.accumulate(*b, grads, |db| {
                    kernels::gemm(ta.data(), Layout::new(m, k).t(), g, Layout::new(m, n), db, 1.0)
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                self.accumulate(*x, grads, |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Sum(x) => self.accumulate(*x, grads, |dx| dx.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let scale = g[0] / self.nodes[x.0].value.numel() as f64;
                self.accumulate(*x, grads, |dx| dx.iter_mut().for_each(|v| *v += scale));
            }
            Op::SumAxis { x, axis } => {
                let shape = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(shape, *axis);
                self.accumulate(*x, grads, |dx| {
                    for o in 0..outer {
                        for k in 0..n {
                            let dst = &mut dx[(o * n + k) * inner..(o * n + k + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                });
            }
            Op::NormLast(x) => {
                let xt = &self.nodes[x.0].value;
                let k = *xt.shape().last().unwrap();
                let (xv, nv) = (xt.data(), out.data());
                self.accumulate(*x, grads, |dx| {
                    for r in 0..nv.len() {
                        if nv[r] > 0.0 {
                            let s = g[r] / nv[r];
                            for j in 0..k {
                                dx[r * k + j] += s * xv[r * k + j];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                self.accumulate(*x, grads, |dx| dx.iter_mut().zip(g).for_each(|(d, s)| *d += s))
            }
            Op::BroadcastTo(x) => {
                let xs = self.nodes[x.0].value.shape();
                self.accumulate(*x, grads, |dx| {
                    for_each_broadcast(out.shape(), xs, out.shape(), |o, i, _| dx[i] += g[o])
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.shape()[*axis];
                    self.accumulate(p, grads, |dp| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (d, s) in dp[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, n, inner) = split_axis(xs, *axis);
                let len = out.shape()[*axis];
                self.accumulate(*x, grads, |dx| {
                    for o in 0..outer {
                        let dst = &mut dx[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (d, s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                            *d += s;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, geom } => {
                let (xv, wv) = (self.nodes[x.0].value.data(), self.nodes[w.0].value.data());
                self.accumulate(*x, grads, |dx| {
                    let d = kernels::conv2d_input_grad(geom, g, wv);
                    dx.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                });
                self.accumulate(*w, grads, |dw| kernels::conv2d_weight_grad(geom, xv, g, dw));
            }
            Op::Conv2dTranspose { g: gin, w, geom } => {
                // y = conv_input_grad(gin, w); upstream `g` is shaped like the conv input.
                let (gv, wv) = (self.nodes[gin.0].value.data(), self.nodes[w.0].value.data());
                self.accumulate(*gin, grads, |dg| {
                    let d = kernels::conv2d_forward(geom, g, wv);
                    dg.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                });
                self.accumulate(*w, grads, |dw| kernels::conv2d_weight_grad(geom, g, gv, dw));
            }
        }
    }

    fn back_binary(
        &self,
        kind: Binary,
        a: Var,
        b: Var,
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (av, bv, ov) = (ta.data(), tb.data(), out.data());
        let (sa, sb, so) = (ta.shape(), tb.shape(), out.shape());
        self.accumulate(a, grads, |da| {
            for_each_broadcast(so, sa, sb, |o, i, j| {
                let d = match kind {
                    Binary::Add | Binary::Sub => 1.0,
                    Binary::Mul => bv[j],
                    Binary::Div => 1.0 / bv[j],
                    Binary::Pow => {
                        if bv[j] == 0.0 {
                            0.0
                        } else {
                            bv[j] * av[i].powf(bv[j] - 1.0)
                        }
                    }
                    Binary::Max => {
                        if av[i] >= bv[j] {
                            1.0
                        } else {
                            0.0
                        }
                    }
                };
                da[i] += g[o] * d;
            })
        });
        self.accumulate(b, grads, |db| {
            for_each_broadcast(so, sa, sb, |o, i, j| {
                let d = match kind {
                    Binary::Add => 1.0,
                    Binary::Sub => -1.0,
                    Binary::Mul => av[i],
                    Binary::Div => -ov[o] / bv[j],
                    Binary::Pow => {
                        if av[i] > 0.0 {
                            ov[o] * av[i].ln()
                        } else {
                            0.0
                        }
                    }
                    Binary::Max => {
                        if av[i] >= bv[j] {
                            0.0
                        } else {
                            1.0
                        }
                    }
                };
                db[j] += g[o] * d;
            })
        });
    }

    /// Runs `f` on the gradient buffer of `v` (allocated on first use) when `v` needs one.
    fn accumulate(&self, v: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]);
        f(slot);
    }
}

fn matrix_dims(op: &'static str, shape: &[usize]) -> Result<[usize; 2]> {
    match shape {
        [r, c] => Ok([*r, *c]),
        _ => Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a matrix, got shape {shape:?}"),
        }),
    }
}

/// `(outer, extent, inner)` element counts around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let st = strides(shape);
    let outer = shape[..axis].iter().product();
    (outer, shape[axis], st[axis])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
