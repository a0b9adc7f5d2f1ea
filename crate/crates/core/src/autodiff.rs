//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node whose inputs already exist on the tape, so reverse
//! iteration is a valid topological order. Parameters live in a
//! [`ParamStore`] outside the tape; [`Tape::param`] snapshots a parameter as a
//! leaf and [`ParamStore::accumulate_from`] folds the leaf gradients back.

use crate::error::{Error, Result};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, rope_rotate, Tensor, ROPE_BASE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    Softmax { x: Var, axis: usize },
    Normalize { x: Var, inv_std: Vec<f64> },
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Gather { x: Var, index: Vec<usize> },
    Rope { x: Var, positions: Vec<f64>, head_dim: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: Vec<Option<Var>>,
    no_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// A tape on which nothing requires gradients; used for inference.
    pub fn no_grad() -> Self {
        Tape {
            no_grad: true,
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && !self.no_grad;
        self.push(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Snapshot of a stored parameter. Repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_cache.get(id.0) {
            return *v;
        }
        let rg = store.is_trainable(id) && !self.no_grad;
        let v = self.push(store.value(id).clone(), Op::Leaf, rg);
        self.nodes[v.0].param = Some(id);
        if self.param_cache.len() <= id.0 {
            self.param_cache.resize(id.0 + 1, None);
        }
        self.param_cache[id.0] = Some(v);
        v
    }

    /// Copy of `v`'s value with no path back to its inputs.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::shape("matmul", ad, bd));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ad = self.dims(a);
        if ad.len() != 2 {
            return Err(Error::shape("transpose", ad, &[2]));
        }
        let (m, n) = (ad[0], ad[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims() != vb.dims() {
            return Err(Error::shape(name, va.dims(), vb.dims()));
        }
        va.zip_map(vb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    fn row_broadcast(&self, a: Var, row: Var, name: &'static str) -> Result<(usize, usize)> {
        let (rows, cols) = self.value(a).matrix_dims();
        if self.value(row).len() != cols {
            return Err(Error::shape(name, self.dims(a), self.dims(row)));
        }
        Ok((rows, cols))
    }

    /// `a + row`, broadcasting `row` (length = last axis of `a`) over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.row_broadcast(a, row, "add_row")?;
        let r = self.value(row).data();
        let out = Tensor::from_fn(self.dims(a), |i| self.value(a).data()[i] + r[i % cols]);
        let ng = self.needs(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), ng))
    }

    /// `a ⊙ row`, broadcasting `row` over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, cols) = self.row_broadcast(a, row, "mul_row")?;
        let r = self.value(row).data();
        let out = Tensor::from_fn(self.dims(a), |i| self.value(a).data()[i] * r[i % cols]);
        let ng = self.needs(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.needs(&[a]);
        self.push(out, Op::Scale(a, c), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        let ng = self.needs(&[a]);
        self.push(out, Op::Gelu(a), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        let ng = self.needs(&[a]);
        self.push(out, Op::Silu(a), ng)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let dims = self.dims(x).to_vec();
        if axis >= dims.len() {
            return Err(Error::Contract(format!("softmax axis {axis} for rank {}", dims.len())));
        }
        let (outer, len, inner) = axis_split(&dims, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..len {
                    max = max.max(src[at(k)]);
                }
                let mut total = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(dims, out)?, Op::Softmax { x, axis }, ng))
    }

    /// Per-row (last axis) standardization: `(x − mean) / sqrt(var + eps)`.
    pub fn normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims();
        if cols < 2 {
            return Err(Error::shape("normalize", self.dims(x), &[2]));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let dims = self.dims(x).to_vec();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(dims, out)?, Op::Normalize { x, inv_std }, ng))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.normalize(x, eps)?;
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let ng = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.dims(parts[0])[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != 2 || d[1] != cols {
                return Err(Error::shape("concat_rows", self.dims(parts[0]), d));
            }
            rows += d[0];
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.dims(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.dims(p);
            if d.len() != 2 || d[0] != rows {
                return Err(Error::shape("concat_cols", self.dims(parts[0]), d));
            }
            widths.push(d[1]);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(Tensor::new(vec![rows, cols], data)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let d = self.dims(x);
        if d.len() != 2 || start >= end || end > d[0] {
            return Err(Error::shape("slice_rows", d, &[start, end]));
        }
        let cols = d[1];
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![end - start, cols], data)?, Op::SliceRows { x, start }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let d = self.dims(x);
        if d.len() != 2 || start >= end || end > d[1] {
            return Err(Error::shape("slice_cols", d, &[start, end]));
        }
        let (rows, cols) = (d[0], d[1]);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let ng = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![rows, end - start], data)?, Op::SliceCols { x, start }, ng))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(dims)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// `out[i] = x.flat[index[i]]`; the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, dims: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("gather", self.dims(x), &[bad]));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let out = Tensor::new(dims.to_vec(), data)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::Gather { x, index }, ng))
    }

    /// Rotary position embedding over the rows of `x` (`[L × d]`).
    pub fn rope(&mut self, x: Var, positions: &[i64], head_dim: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).matrix_dims();
        if !head_dim.is_multiple_of(2) || cols % head_dim != 0 || positions.len() != rows {
            return Err(Error::shape("rope", self.dims(x), &[positions.len(), head_dim]));
        }
        let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
        let mut out = vec![0.0; rows * cols];
        rope_rotate(self.value(x).data(), &mut out, cols, head_dim, &pos, ROPE_BASE, 1.0);
        let out = Tensor::new(self.dims(x).to_vec(), out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(
            out,
            Op::Rope {
                x,
                positions: pos,
                head_dim,
            },
            ng,
        ))
    }

    /// Populates gradients of every `requires_grad` leaf reachable from
    /// `root`. Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got dims {:?}",
                self.dims(root)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.nodes[id].grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.dims(a)[0], self.dims(a)[1]);
                let n = self.dims(b)[1];
                send(a, &mut |s| matmul_nt(g, val(b), s, m, n, k));
                send(b, &mut |s| matmul_tn(val(a), g, s, m, k, n));
            }
            &Op::Transpose(a) => {
                let (m, n) = (self.dims(a)[0], self.dims(a)[1]);
                send(a, &mut |s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                send(a, &mut |s| add_into(s, g));
                send(b, &mut |s| add_into(s, g));
            }
            &Op::Sub(a, b) => {
                send(a, &mut |s| add_into(s, g));
                send(b, &mut |s| s.iter_mut().zip(g).for_each(|(o, d)| *o -= d));
            }
            &Op::Mul(a, b) => {
                send(a, &mut |s| {
                    for ((o, d), y) in s.iter_mut().zip(g).zip(val(b)) {
                        *o += d * y;
                    }
                });
                send(b, &mut |s| {
                    for ((o, d), x) in s.iter_mut().zip(g).zip(val(a)) {
                        *o += d * x;
                    }
                });
            }
            &Op::AddRow(a, r) => {
                send(a, &mut |s| add_into(s, g));
                let cols = self.value(r).len();
                send(r, &mut |s| {
                    for (i, d) in g.iter().enumerate() {
                        s[i % cols] += d;
                    }
                });
            }
            &Op::MulRow(a, r) => {
                let cols = self.value(r).len();
                let rv = val(r);
                send(a, &mut |s| {
                    for (i, (o, d)) in s.iter_mut().zip(g).enumerate() {
                        *o += d * rv[i % cols];
                    }
                });
                let av = val(a);
                send(r, &mut |s| {
                    for (i, d) in g.iter().enumerate() {
                        s[i % cols] += d * av[i];
                    }
                });
            }
            &Op::Scale(a, c) => send(a, &mut |s| s.iter_mut().zip(g).for_each(|(o, d)| *o += d * c)),
            &Op::Gelu(a) => send(a, &mut |s| {
                for ((o, d), &x) in s.iter_mut().zip(g).zip(val(a)) {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let th = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *o += d * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
                }
            }),
            &Op::Silu(a) => send(a, &mut |s| {
                for ((o, d), &x) in s.iter_mut().zip(g).zip(val(a)) {
                    let sg = 1.0 / (1.0 + (-x).exp());
                    *o += d * sg * (1.0 + x * (1.0 - sg));
                }
            }),
            &Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_split(node.value.dims(), axis);
                send(x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                s[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Normalize { x, inv_std } => {
                let y = node.value.data();
                let (_, cols) = node.value.matrix_dims();
                send(*x, &mut |s| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let yr = &y[r * cols..(r + 1) * cols];
                        let mg = gr.iter().sum::<f64>() / cols as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for k in 0..cols {
                            s[r * cols + k] += is * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                });
            }
            &Op::Sum(a) => send(a, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                send(a, &mut |s| s.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    send(p, &mut |s| add_into(s, &g[off..off + len]));
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.dims()[0];
                let cols = node.value.dims()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p)[1];
                    send(p, &mut |s| {
                        for r in 0..rows {
                            add_into(&mut s[r * w..(r + 1) * w], &g[r * cols + off..r * cols + off + w]);
                        }
                    });
                    off += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let cols = self.dims(x)[1];
                send(x, &mut |s| add_into(&mut s[start * cols..start * cols + g.len()], g));
            }
            &Op::SliceCols { x, start } => {
                let cols = self.dims(x)[1];
                let (rows, w) = (node.value.dims()[0], node.value.dims()[1]);
                send(x, &mut |s| {
                    for r in 0..rows {
                        add_into(&mut s[r * cols + start..r * cols + start + w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            &Op::Reshape(a) => send(a, &mut |s| add_into(s, g)),
            Op::Gather { x, index } => send(*x, &mut |s| {
                for (&i, d) in index.iter().zip(g) {
                    s[i] += d;
                }
            }),
            Op::Rope { x, positions, head_dim } => {
                let cols = node.value.dims()[node.value.dims().len() - 1];
                send(*x, &mut |s| {
                    let mut back = vec![0.0; g.len()];
                    rope_rotate(g, &mut back, cols, *head_dim, positions, ROPE_BASE, -1.0);
                    add_into(s, &back);
                });
            }
        }
    }

    /// `(param, grad)` pairs for every parameter leaf that received a gradient.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn axis_split(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = dims[..axis].iter().product();
    let inner = dims[axis + 1..].iter().product();
    (outer, dims[axis], inner)
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

/// Named parameters in registration order, with their accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate param {name}");
        let grad = vec![0.0; value.len()];
        self.params.push(Param {
            name,
            value,
            grad,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Marks exactly the parameters accepted by `keep` as trainable.
    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = keep(&p.name);
        }
    }

    pub fn set_param_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the tape's parameter-leaf gradients into the stored gradients.
    pub fn accumulate_from(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            add_into(&mut self.params[id.0].grad, g);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
