use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gemm, sigmoid, split_axis, transpose_last2, MatView};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a particular [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat(Vec<usize>, usize),
    Slice(usize, usize, usize),
    Sum(usize),
    SumAxis(usize, usize),
    Mean(usize),
    MeanAxis(usize, usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Sqrt(usize),
    Softmax(usize),
    LayerNorm(usize, f64),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Topologically ordered record of one forward pass.
///
/// Nodes are only ever appended, and every op's inputs already exist when the
/// op is recorded, so insertion order is a valid topological order.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, if it was tracked.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        if var.graph != self.graph {
            return None;
        }
        self.grads.get_mut(var.index).and_then(|g| g.take())
    }
}

fn same_or_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a leaf whose gradient will be computed.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, true)
    }

    /// Register a leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(Op::Leaf, value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        assert_eq!(var.graph, self.id, "Var used on a foreign graph");
        &self.nodes[var.index].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    fn check(&self, var: Var) -> Result<&Node> {
        if var.graph != self.id {
            return Err(Error::Invalid("variable belongs to a different graph".into()));
        }
        Ok(&self.nodes[var.index])
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn push(&mut self, op_name: &'static str, op: Op, value: Tensor, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(op, value, requires_grad))
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Vec<usize>)> {
        let sa = self.check(a)?.value.shape().to_vec();
        let sb = self.check(b)?.value.shape().to_vec();
        if !same_or_suffix(&sa, &sb) {
            return Err(Error::Shape { op, lhs: sa, rhs: sb });
        }
        Ok((sa, sb))
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, _) = self.binary_shapes(name, a, b)?;
        let av = self.nodes[a.index].value.data();
        let bv = self.nodes[b.index].value.data();
        let n = bv.len();
        let data: Vec<f64> = av
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        self.push(name, op, Tensor::from_parts(sa, data), &[a.index, b.index])
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a.index, b.index))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a.index, b.index))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a.index, b.index))
    }

    /// Elementwise `a / b` for equal shapes.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = self.binary_shapes("div", a, b)?;
        if sa != sb {
            return Err(Error::Shape { op: "div", lhs: sa, rhs: sb });
        }
        self.broadcast_binary("div", a, b, |x, y| x / y, Op::Div(a.index, b.index))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let node = self.check(a)?;
        let shape = node.value.shape().to_vec();
        let data = node.value.data().iter().map(|&x| f(x)).collect();
        self.push(name, op, Tensor::from_parts(shape, data), &[a.index])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a.index, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a.index))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a.index))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.index))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.index))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a.index))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let node = self.check(a)?;
        if node.value.data().iter().any(|&x| x < 0.0) {
            return Err(Error::NonFinite { op: "sqrt" });
        }
        self.unary("sqrt", a, f64::sqrt, Op::Sqrt(a.index))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Matrix product of `(m, k) @ (k, n)` or batched `(b, m, k) @ (b, k, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.check(a)?.value.shape().to_vec();
        let sb = self.check(b)?.value.shape().to_vec();
        let err = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            (&[m, k], &[k2, n]) if k == k2 => (1, m, k, n, vec![m, n]),
            (&[bt, m, k], &[bt2, k2, n]) if k == k2 && bt == bt2 => (bt, m, k, n, vec![bt, m, n]),
            _ => return Err(err()),
        };
        let av = self.nodes[a.index].value.data();
        let bv = self.nodes[b.index].value.data();
        let mut data = vec![0.0; batch * m * n];
        for i in 0..batch {
            gemm(
                MatView::new(&av[i * m * k..(i + 1) * m * k], m, k),
                MatView::new(&bv[i * k * n..(i + 1) * k * n], k, n),
                &mut data[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        self.push(
            "matmul",
            Op::MatMul(a.index, b.index),
            Tensor::from_parts(out_shape, data),
            &[a.index, b.index],
        )
    }

    /// Swap the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        let shape = t.shape().to_vec();
        let (batch, r, c) = match shape.as_slice() {
            &[r, c] => (1, r, c),
            &[b, r, c] => (b, r, c),
            _ => {
                return Err(Error::Shape {
                    op: "transpose",
                    lhs: shape,
                    rhs: vec![],
                })
            }
        };
        let data = transpose_last2(t.data(), batch, r, c);
        let mut out_shape = shape.clone();
        let nd = out_shape.len();
        out_shape.swap(nd - 1, nd - 2);
        self.push("transpose", Op::Transpose(a.index), Tensor::from_parts(out_shape, data), &[a.index])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.check(a)?.value;
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        self.push("reshape", Op::Reshape(a.index), out, &[a.index])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.check(*first)?.value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![axis],
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.check(v)?.value.shape();
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = &self.nodes[v.index].value;
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let idx: Vec<usize> = inputs.iter().map(|v| v.index).collect();
        self.push("concat", Op::Concat(idx.clone(), axis), Tensor::from_parts(out_shape, data), &idx)
    }

    /// `a[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = &self.check(a)?.value;
        let shape = t.shape().to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: shape,
                rhs: vec![axis, start, end],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&t.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        self.push("slice", Op::Slice(a.index, axis, start), Tensor::from_parts(out_shape, data), &[a.index])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.check(a)?.value.data().iter().sum();
        self.push("sum", Op::Sum(a.index), Tensor::scalar(s), &[a.index])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Op::Mean(a.index), Tensor::scalar(s), &[a.index])
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean_axis" } else { "sum_axis" };
        let t = &self.check(a)?.value;
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: name,
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &t.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &x) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += x;
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f64;
            data.iter_mut().for_each(|d| *d *= inv);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let op = if mean {
            Op::MeanAxis(a.index, axis)
        } else {
            Op::SumAxis(a.index, axis)
        };
        self.push(name, op, Tensor::from_parts(out_shape, data), &[a.index])
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.check(a)?.value;
        let shape = t.shape().to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        self.push("softmax", Op::Softmax(a.index), Tensor::from_parts(shape, data), &[a.index])
    }

    /// Normalize the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = &self.check(a)?.value;
        let shape = t.shape().to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let (mu, inv_std) = row_stats(row, eps);
            row.iter_mut().for_each(|x| *x = (*x - mu) * inv_std);
        }
        self.push("layer_norm", Op::LayerNorm(a.index, eps), Tensor::from_parts(shape, data), &[a.index])
    }

    /// Reverse-mode sweep from a scalar `root`.
    ///
    /// Every parameter leaf receives a gradient; leaves the root does not
    /// depend on get zeros.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.graph != self.id {
            return Err(Error::Backward("root is detached from this graph".into()));
        }
        let root_node = &self.nodes[root.index];
        if root_node.value.numel() != 1 {
            return Err(Error::Backward(format!(
                "root must be scalar, got shape {:?}",
                root_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.index] = Some(vec![1.0]);

        for i in (0..=root.index).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (g, &node.op, node.requires_grad) {
                (Some(g), _, true) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                (None, Op::Leaf, true) => Some(Tensor::zeros(node.value.shape())),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            graph: self.id,
            grads: out,
        })
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().copied());
                }
                if self.wants(*b) {
                    let n = self.val(*b).numel();
                    let mut gb = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        gb.iter_mut().zip(chunk).for_each(|(d, &x)| *d += sign * x);
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let av = self.val(*a).data();
                let bv = self.val(*b).data();
                let n = bv.len();
                if self.wants(*a) {
                    let ga: Vec<f64> = g
                        .chunks(n)
                        .flat_map(|c| c.iter().zip(bv).map(|(&x, &w)| x * w))
                        .collect();
                    accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; n];
                    for (gc, ac) in g.chunks(n).zip(av.chunks(n)) {
                        for ((d, &x), &w) in gb.iter_mut().zip(gc).zip(ac) {
                            *d += x * w;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Div(a, b) => {
                let av = self.val(*a).data();
                let bv = self.val(*b).data();
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(&x, &w)| x / w));
                }
                if self.wants(*b) {
                    let gb = g
                        .iter()
                        .zip(av)
                        .zip(bv)
                        .map(|((&x, &u), &w)| -x * u / (w * w));
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.iter().map(|&x| x * s)),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(grads, *a, g.iter().copied()),
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, grads),
            Op::Transpose(a) => {
                let s = self.val(*a).shape();
                let (batch, r, c) = match *s {
                    [r, c] => (1, r, c),
                    [b, r, c] => (b, r, c),
                    _ => unreachable!(),
                };
                // g has shape (.., c, r)
                accumulate(grads, *a, transpose_last2(g, batch, c, r));
            }
            Op::Concat(inputs, axis) => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for &inp in inputs {
                    let len = self.val(inp).shape()[*axis];
                    if self.wants(inp) {
                        let mut gi = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gi.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(grads, inp, gi);
                    }
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                let shape = self.val(*a).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let width = node.value.shape()[*axis];
                let mut ga = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    ga[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let n = self.val(*a).numel();
                accumulate(grads, *a, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(a) => {
                let n = self.val(*a).numel();
                accumulate(grads, *a, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.val(*a).shape(), *axis);
                let factor = if matches!(node.op, Op::MeanAxis(..)) {
                    1.0 / len as f64
                } else {
                    1.0
                };
                let mut ga = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        ga.extend(g[o * inner..(o + 1) * inner].iter().map(|&x| x * factor));
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::Sigmoid(a) => accumulate(grads, *a, g.iter().zip(y).map(|(&x, &s)| x * s * (1.0 - s))),
            Op::Tanh(a) => accumulate(grads, *a, g.iter().zip(y).map(|(&x, &t)| x * (1.0 - t * t))),
            Op::Relu(a) => {
                let av = self.val(*a).data();
                accumulate(grads, *a, g.iter().zip(av).map(|(&x, &u)| if u > 0.0 { x } else { 0.0 }));
            }
            Op::Exp(a) => accumulate(grads, *a, g.iter().zip(y).map(|(&x, &e)| x * e)),
            Op::Sqrt(a) => accumulate(grads, *a, g.iter().zip(y).map(|(&x, &r)| x / (2.0 * r))),
            Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    ga.extend(gr.iter().zip(yr).map(|(&gi, &yi)| yi * (gi - dot)));
                }
                accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, eps) => {
                let n = *node.value.shape().last().unwrap();
                let x = self.val(*a).data();
                let mut ga = Vec::with_capacity(g.len());
                for ((gr, yr), xr) in g.chunks(n).zip(y.chunks(n)).zip(x.chunks(n)) {
                    let (_, inv_std) = row_stats(xr, *eps);
                    let mean_g = gr.iter().sum::<f64>() / n as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    ga.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(&gi, &yi)| inv_std * (gi - mean_g - yi * mean_gy)),
                    );
                }
                accumulate(grads, *a, ga);
            }
        }
    }

    fn matmul_backward(&self, a: usize, b: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let at = self.val(a);
        let bt = self.val(b);
        let (batch, m, k) = match *at.shape() {
            [m, k] => (1, m, k),
            [bt, m, k] => (bt, m, k),
            _ => unreachable!(),
        };
        let n = *bt.shape().last().unwrap();
        if self.wants(a) {
            let mut ga = vec![0.0; batch * m * k];
            for i in 0..batch {
                gemm(
                    MatView::new(&g[i * m * n..(i + 1) * m * n], m, n),
                    MatView::new(&bt.data()[i * k * n..(i + 1) * k * n], k, n).t(),
                    &mut ga[i * m * k..(i + 1) * m * k],
                    0.0,
                );
            }
            accumulate(grads, a, ga);
        }
        if self.wants(b) {
            let mut gb = vec![0.0; batch * k * n];
            for i in 0..batch {
                gemm(
                    MatView::new(&at.data()[i * m * k..(i + 1) * m * k], m, k).t(),
                    MatView::new(&g[i * m * n..(i + 1) * m * n], m, n),
                    &mut gb[i * k * n..(i + 1) * k * n],
                    0.0,
                );
            }
            accumulate(grads, b, gb);
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, contribution: impl IntoIterator<Item = f64>) {
    match &mut grads[i] {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(d, x)| *d += x),
        slot @ None => *slot = Some(contribution.into_iter().collect()),
    }
}
