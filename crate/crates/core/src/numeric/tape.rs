//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs. Because a node can only reference nodes that already exist,
//! the node list is a topological order and [`Tape::backward`] is a single
//! reverse sweep that visits each node once.
//!
//! Besides the elementwise and linear families, two fused kernels are
//! provided for the sequence models: token-major multi-head self-attention
//! and same-padded 1-D convolution. Both treat a rank-2 `(batch·seq)×features`
//! matrix as `batch` independent sequences of length `seq`.

use super::tensor::{axis_extents, gemm, gemm_strided, StridedMut, StridedRef, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    GatherRows { input: Var, index: Vec<usize> },
    Sum(Var),
    SumAxis { input: Var, axis: usize },
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, axis: usize, inv_std: Vec<f64> },
    Attention { qkv: Var, seq: usize, heads: usize, probs: Vec<f64> },
    Conv1d { input: Var, weight: Var, seq: usize, kernel: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, sa, sb));
        }
        Ok(())
    }

    fn rank2(&self, a: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(dim_err(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a], "scale")
    }

    fn row_operand(&self, a: Var, b: Var, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.rank2(a, op)?;
        if self.value(b).len() != n {
            return Err(dim_err(op, self.shape(a), self.shape(b)));
        }
        Ok((m, n))
    }

    /// `a + b` with the vector `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_operand(a, b, "add_row")?;
        let bias = self.value(b).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(bias).for_each(|(x, b)| *x += b);
        }
        self.push(out, Op::AddRow(a, b), &[a, b], "add_row")
    }

    /// `a ⊙ b` with the vector `b` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (_, n) = self.row_operand(a, b, "mul_row")?;
        let gain = self.value(b).data();
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            row.iter_mut().zip(gain).for_each(|(x, g)| *x *= g);
        }
        self.push(out, Op::MulRow(a, b), &[a, b], "mul_row")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes its operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.rank2(a, "matmul")?;
        let (br, bc) = self.rank2(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            0.0,
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b], "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push(out, Op::Transpose(a), &[a], "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        self.push(out, Op::Reshape(a), &[a], "reshape")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(dim_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
            "concat",
        )
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(dim_err("slice", &s, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::Slice { input: a, axis, start }, &[a], "slice")
    }

    /// Rows of a rank-2 tensor selected (with repetition) by `index`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.rank2(a, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(dim_err("gather_rows", &[r, c], &[bad]));
        }
        let t = self.value(a);
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![index.len(), c], out)?;
        self.push(
            out,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
            &[a],
            "gather_rows",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(dim_err("sum_axis", &s, &[axis]));
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(row)
                    .for_each(|(acc, x)| *acc += x);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        self.push(out, Op::SumAxis { input: a, axis }, &[a], "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| dim_err("mean_axis", self.shape(a), &[axis]))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a], "relu")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a], "gelu")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), &[a], "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a], "sigmoid")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(dim_err("softmax", &s, &[axis]));
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        let mut out = self.value(a).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| d[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (d[idx(i)] - max).exp();
                    d[idx(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    d[idx(i)] /= total;
                }
            }
        }
        self.push(out, Op::Softmax { input: a, axis }, &[a], "softmax")
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(dim_err("layer_norm", &s, &[axis]));
        }
        let (outer, n, inner) = axis_extents(&s, axis);
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(outer * inner);
        let d = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let mean = (0..n).map(|i| d[idx(i)]).sum::<f64>() / n as f64;
                let var = (0..n).map(|i| (d[idx(i)] - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + eps).sqrt();
                for i in 0..n {
                    d[idx(i)] = (d[idx(i)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                input: a,
                axis,
                inv_std,
            },
            &[a],
            "layer_norm",
        )
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `(batch·seq)×3d` holding the query, key and value projections
    /// side by side; attention runs independently within each block of `seq`
    /// rows. Returns the concatenated head outputs, `(batch·seq)×d`.
    pub fn attention(&mut self, qkv: Var, seq: usize, heads: usize) -> Result<Var> {
        let (rows, d3) = self.rank2(qkv, "attention")?;
        if seq == 0 || rows % seq != 0 || d3 % 3 != 0 || heads == 0 || (d3 / 3) % heads != 0 {
            return Err(dim_err("attention", &[rows, d3], &[seq, heads]));
        }
        let (out, probs) = attention_forward(self.value(qkv).data(), rows, d3, seq, heads);
        let out = Tensor::new(vec![rows, d3 / 3], out)?;
        self.push(
            out,
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            },
            &[qkv],
            "attention",
        )
    }

    /// Same-padded convolution along the sequence axis.
    ///
    /// `input` is `(batch·seq)×c_in`; `weight` is `(kernel·c_in)×c_out`, i.e.
    /// `kernel` stacked `c_in×c_out` taps. Output tap `k` reads input offset
    /// `k - kernel/2`; positions outside the sequence are zero.
    pub fn conv1d(&mut self, input: Var, weight: Var, seq: usize, kernel: usize) -> Result<Var> {
        let (rows, cin) = self.rank2(input, "conv1d")?;
        let (wr, cout) = self.rank2(weight, "conv1d")?;
        if kernel.is_multiple_of(2) || seq == 0 || rows % seq != 0 || wr != kernel * cin {
            return Err(dim_err("conv1d", &[rows, cin], &[wr, cout]));
        }
        let mut out = vec![0.0; rows * cout];
        let x = self.value(input).data();
        let w = self.value(weight).data();
        for_each_conv_tap(rows / seq, seq, kernel, |dst, src, count, k| {
            gemm_strided(
                count,
                cin,
                cout,
                1.0,
                StridedRef::new(&x[src * cin..], cin, 1),
                StridedRef::new(&w[k * cin * cout..], cout, 1),
                1.0,
                StridedMut::new(&mut out[dst * cout..], cout, 1),
            );
        });
        let out = Tensor::new(vec![rows, cout], out)?;
        self.push(
            out,
            Op::Conv1d {
                input,
                weight,
                seq,
                kernel,
            },
            &[input, weight],
            "conv1d",
        )
    }

    /// Reverse sweep from the scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[v.0];
            if !target.requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.len()]);
            f(buf);
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| axpy(d, 1.0, g));
                acc(*b, &mut |d| axpy(d, 1.0, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| axpy(d, 1.0, g));
                acc(*b, &mut |d| axpy(d, -1.0, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    d.iter_mut().zip(g).zip(vb).for_each(|((d, g), y)| *d += g * y)
                });
                acc(*b, &mut |d| {
                    d.iter_mut().zip(g).zip(va).for_each(|((d, g), x)| *d += g * x)
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| axpy(d, *s, g)),
            Op::AddRow(a, b) => {
                let n = val(*b).len();
                acc(*a, &mut |d| axpy(d, 1.0, g));
                acc(*b, &mut |d| {
                    for row in g.chunks_exact(n) {
                        axpy(d, 1.0, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let n = vb.len();
                acc(*a, &mut |d| {
                    for (drow, grow) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)) {
                        for j in 0..n {
                            drow[j] += grow[j] * vb[j];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for (grow, arow) in g.chunks_exact(n).zip(va.chunks_exact(n)) {
                        for j in 0..n {
                            d[j] += grow[j] * arow[j];
                        }
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    if *ta {
                        gemm(k, n, m, 1.0, vb, *tb, g, true, 1.0, d);
                    } else {
                        gemm(m, n, k, 1.0, g, false, vb, !*tb, 1.0, d);
                    }
                });
                acc(*b, &mut |d| {
                    if *tb {
                        gemm(n, m, k, 1.0, g, true, va, *ta, 1.0, d);
                    } else {
                        gemm(k, m, n, 1.0, va, !*ta, g, false, 1.0, d);
                    }
                });
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |d| axpy(d, 1.0, g)),
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = axis_extents(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for v in inputs {
                    let block = self.nodes[v.0].value.shape()[*axis] * inner;
                    acc(*v, &mut |d| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + block];
                            axpy(&mut d[o * block..(o + 1) * block], 1.0, src);
                        }
                    });
                    offset += block;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.nodes[input.0].value.shape();
                let (outer, n, inner) = axis_extents(s, *axis);
                let len = node.value.shape()[*axis];
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        axpy(&mut d[base..base + len * inner], 1.0, src);
                    }
                });
            }
            Op::GatherRows { input, index } => {
                let c = node.value.shape()[1];
                acc(*input, &mut |d| {
                    for (r, &i) in index.iter().enumerate() {
                        axpy(&mut d[i * c..(i + 1) * c], 1.0, &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::SumAxis { input, axis } => {
                let s = self.nodes[input.0].value.shape();
                let (outer, n, inner) = axis_extents(s, *axis);
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for i in 0..n {
                            let base = (o * n + i) * inner;
                            axpy(&mut d[base..base + inner], 1.0, &g[o * inner..(o + 1) * inner]);
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(x[i]);
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - out[i] * out[i]);
                }
            }),
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let dot: f64 = (0..n).map(|i| g[idx(i)] * out[idx(i)]).sum();
                            for i in 0..n {
                                d[idx(i)] += out[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                axis,
                inv_std,
            } => {
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                acc(*input, &mut |d| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let r = inv_std[o * inner + j];
                            let mean_g = (0..n).map(|i| g[idx(i)]).sum::<f64>() / n as f64;
                            let mean_gx =
                                (0..n).map(|i| g[idx(i)] * out[idx(i)]).sum::<f64>() / n as f64;
                            for i in 0..n {
                                d[idx(i)] += r * (g[idx(i)] - mean_g - out[idx(i)] * mean_gx);
                            }
                        }
                    }
                });
            }
            Op::Attention {
                qkv,
                seq,
                heads,
                probs,
            } => {
                let s = self.nodes[qkv.0].value.shape();
                let x = val(*qkv);
                acc(*qkv, &mut |d| {
                    attention_backward(x, probs, g, d, s[0], s[1], *seq, *heads)
                });
            }
            Op::Conv1d {
                input,
                weight,
                seq,
                kernel,
            } => {
                let s = self.nodes[input.0].value.shape();
                let (rows, cin) = (s[0], s[1]);
                let cout = node.value.shape()[1];
                let (x, w) = (val(*input), val(*weight));
                let batches = rows / seq;
                acc(*input, &mut |d| {
                    for_each_conv_tap(batches, *seq, *kernel, |dst, src, count, k| {
                        gemm_strided(
                            count,
                            cout,
                            cin,
                            1.0,
                            StridedRef::new(&g[dst * cout..], cout, 1),
                            StridedRef::new(&w[k * cin * cout..], cout, 1).t(),
                            1.0,
                            StridedMut::new(&mut d[src * cin..], cin, 1),
                        );
                    });
                });
                acc(*weight, &mut |d| {
                    for_each_conv_tap(batches, *seq, *kernel, |dst, src, count, k| {
                        gemm_strided(
                            cin,
                            count,
                            cout,
                            1.0,
                            StridedRef::new(&x[src * cin..], cin, 1).t(),
                            StridedRef::new(&g[dst * cout..], cout, 1),
                            1.0,
                            StridedMut::new(&mut d[k * cin * cout..], cout, 1),
                        );
                    });
                });
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`]; leaves that did not take part
/// in the loss report zeros.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn collect(mut self, vars: &[Var]) -> Vec<Tensor> {
        vars.iter().map(|v| self.take(*v)).collect()
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += a * x);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Calls `f(dst_row, src_row, count, tap)` for every valid input/output row
/// range of a same-padded convolution.
fn for_each_conv_tap(
    batches: usize,
    seq: usize,
    kernel: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let pad = (kernel / 2) as isize;
    let seq_i = seq as isize;
    for b in 0..batches {
        for k in 0..kernel {
            let shift = k as isize - pad;
            let lo = (-shift).max(0);
            let hi = (seq_i - shift).min(seq_i);
            if hi <= lo {
                continue;
            }
            let dst = b * seq + lo as usize;
            let src = (b as isize * seq_i + lo + shift) as usize;
            f(dst, src, (hi - lo) as usize, k);
        }
    }
}

fn attention_forward(
    qkv: &[f64],
    rows: usize,
    d3: usize,
    seq: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = d3 / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let batches = rows / seq;
    let mut out = vec![0.0; rows * d];
    let mut probs = vec![0.0; batches * heads * seq * seq];
    for b in 0..batches {
        for h in 0..heads {
            let q = b * seq * d3 + h * dh;
            let k = q + d;
            let v = q + 2 * d;
            let p_off = (b * heads + h) * seq * seq;
            let p = &mut probs[p_off..p_off + seq * seq];
            gemm_strided(
                seq,
                dh,
                seq,
                scale,
                StridedRef::new(&qkv[q..], d3, 1),
                StridedRef::new(&qkv[k..], d3, 1).t(),
                0.0,
                StridedMut::new(p, seq, 1),
            );
            for row in p.chunks_exact_mut(seq) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    total += *x;
                }
                row.iter_mut().for_each(|x| *x /= total);
            }
            gemm_strided(
                seq,
                seq,
                dh,
                1.0,
                StridedRef::new(p, seq, 1),
                StridedRef::new(&qkv[v..], d3, 1),
                0.0,
                StridedMut::new(&mut out[b * seq * d + h * dh..], d, 1),
            );
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    qkv: &[f64],
    probs: &[f64],
    g: &[f64],
    dqkv: &mut [f64],
    rows: usize,
    d3: usize,
    seq: usize,
    heads: usize,
) {
    let d = d3 / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let batches = rows / seq;
    let mut dp = vec![0.0; seq * seq];
    for b in 0..batches {
        for h in 0..heads {
            let q = b * seq * d3 + h * dh;
            let k = q + d;
            let v = q + 2 * d;
            let go = b * seq * d + h * dh;
            let p_off = (b * heads + h) * seq * seq;
            let p = &probs[p_off..p_off + seq * seq];
            // dV = Pᵀ dO
            gemm_strided(
                seq,
                seq,
                dh,
                1.0,
                StridedRef::new(p, seq, 1).t(),
                StridedRef::new(&g[go..], d, 1),
                1.0,
                StridedMut::new(&mut dqkv[v..], d3, 1),
            );
            // dP = dO Vᵀ
            gemm_strided(
                seq,
                dh,
                seq,
                1.0,
                StridedRef::new(&g[go..], d, 1),
                StridedRef::new(&qkv[v..], d3, 1).t(),
                0.0,
                StridedMut::new(&mut dp, seq, 1),
            );
            for (dp_row, p_row) in dp.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                for (x, pv) in dp_row.iter_mut().zip(p_row) {
                    *x = pv * (*x - dot);
                }
            }
            // dQ = scale · dS K, dK = scale · dSᵀ Q
            gemm_strided(
                seq,
                seq,
                dh,
                scale,
                StridedRef::new(&dp, seq, 1),
                StridedRef::new(&qkv[k..], d3, 1),
                1.0,
                StridedMut::new(&mut dqkv[q..], d3, 1),
            );
            gemm_strided(
                seq,
                seq,
                dh,
                scale,
                StridedRef::new(&dp, seq, 1).t(),
                StridedRef::new(&qkv[q..], d3, 1),
                1.0,
                StridedMut::new(&mut dqkv[k..], d3, 1),
            );
        }
    }
}
