// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each primitive appends a
//! node holding its forward value and enough context to run its
//! vector-Jacobian product; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients (`+=`) into the leaves created with
//! `requires_grad = true`. Nodes whose inputs are all constant are marked as
//! not needing gradients and are skipped entirely during the reverse sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Error, Result};
use crate::tensor::{check_shape, Tensor};

/// Pre-softmax fill value for masked attention scores.
pub const MASK_VALUE: f32 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Softmax(Var),
    LogSoftmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f32> },
    Embed { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var> },
    SplitHeads { a: Var, batch: usize, seq: usize, heads: usize, d_head: usize },
    MergeHeads { a: Var, batch: usize, seq: usize, heads: usize, d_head: usize },
    Log(Var),
    Exp(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Relu(Var),
    Sum(Var),
    L1Norm(Var),
    L2Norm(Var),
    CausalMask(Var),
    Gather { a: Var, idx: Vec<usize> },
    GroupSum { a: Var, groups: Vec<Option<usize>> },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f32>>>,
}

fn cols(shape: &[usize]) -> usize {
    *shape.last().expect("shapes are non-empty")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    /// Snapshot of a node's value as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("graph nodes hold valid shapes")
    }

    /// Copies a tensor in as a leaf; it receives gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> Result<Var> {
        let n = check_shape(shape)?;
        ensure!(data.len() == n, "constant data length {} does not match shape {shape:?}", data.len());
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ----------------------------------------------------------------------
    // Primitives
    // ----------------------------------------------------------------------

    /// Matrix product. Rank-2 operands give `[m,k] x [k,n]`; rank-3 operands
    /// are batched over the leading axis. With `trans_b` the right operand is
    /// read as `[.., n, k]` and transposed.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::invalid(format!("matmul shape mismatch: {sa:?} x {sb:?} (trans_b={trans_b})"));
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (bk, bn) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if sa[1] != bk {
                    return Err(mismatch());
                }
                (1, sa[0], sa[1], bn)
            }
            (3, 3) => {
                let (bk, bn) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa[0] != sb[0] || sa[2] != bk {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sa[2], bn)
            }
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for bi in 0..batch {
                let ao = &av[bi * m * k..(bi + 1) * m * k];
                let bo = &bv[bi * k * n..(bi + 1) * k * n];
                let co = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(ao, bo, co, m, k, n);
                } else {
                    gemm_nn(ao, bo, co, m, k, n);
                }
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::MatMul { a, b, batch, m, k, n, trans_b }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{what} shape mismatch: {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), value, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, r: Var, what: &str, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let n = cols(self.shape(a));
        ensure!(
            self.shape(r) == [n],
            "{what} shape mismatch: {:?} vs row {:?}",
            self.shape(a),
            self.shape(r)
        );
        let rv = self.value(r);
        let value = self.value(a).iter().enumerate().map(|(i, &x)| f(x, rv[i % n])).collect();
        let ng = self.ng(a) || self.ng(r);
        Ok(self.push(self.shape(a).to_vec(), value, op, ng))
    }

    /// Adds a length-`n` vector to every row of `a` (last axis `n`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), value, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, libm::logf, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, libm::expf, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `log(sigmoid(x))`, evaluated stably for large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    fn rowwise(&mut self, a: Var, f: impl Fn(&[f32], &mut [f32]), op: Op) -> Var {
        let n = cols(self.shape(a));
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for (x, y) in src.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            f(x, y);
        }
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.rowwise(a, softmax_row, Op::Softmax(a))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        self.rowwise(a, log_softmax_row, Op::LogSoftmax(a))
    }

    /// Root-mean-square normalization of each row, times a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let n = cols(self.shape(x));
        ensure!(
            self.shape(gain) == [n],
            "rms_norm shape mismatch: {:?} vs gain {:?}",
            self.shape(x),
            self.shape(gain)
        );
        let (xv, gv) = (self.value(x), self.value(gain));
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = Vec::with_capacity(xv.len() / n);
        for (row, o) in xv.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / n as f32;
            let inv = 1.0 / libm::sqrtf(ms + eps);
            inv_rms.push(inv);
            for j in 0..n {
                o[j] = row[j] * inv * gv[j];
            }
        }
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(self.shape(x).to_vec(), out, Op::RmsNorm { x, gain, inv_rms }, ng))
    }

    /// Gathers rows of a `[rows, d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        ensure!(shape.len() == 2, "embed table must be rank 2, got {shape:?}");
        ensure!(!ids.is_empty(), "embed needs at least one id");
        let (rows, d) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            ensure!(id < rows, "embed id {id} out of range for table {shape:?}");
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Embed { table, ids: ids.to_vec() }, ng))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        ensure!(!parts.is_empty(), "concat needs at least one part");
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        for &p in parts {
            let s = self.shape(p);
            ensure!(
                s[..s.len() - 1] == lead[..],
                "concat shape mismatch: {:?} vs {:?}",
                self.shape(parts[0]),
                s
            );
        }
        let rows: usize = lead.iter().product();
        let widths: Vec<usize> = parts.iter().map(|&p| cols(self.shape(p))).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec() }, ng))
    }

    /// `[batch*seq, heads*d_head]` to `[batch*heads, seq, d_head]`.
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(
            s.len() == 2 && s[0] == batch * seq && s[1] % heads == 0,
            "split_heads shape mismatch: {s:?} vs batch={batch} seq={seq} heads={heads}"
        );
        let d_head = s[1] / heads;
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let from = (b * seq + t) * heads * d_head + h * d_head;
                    let to = ((b * heads + h) * seq + t) * d_head;
                    out[to..to + d_head].copy_from_slice(&src[from..from + d_head]);
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![batch * heads, seq, d_head], out, Op::SplitHeads { a, batch, seq, heads, d_head }, ng))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, heads: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(
            s.len() == 3 && s[0] == batch * heads,
            "merge_heads shape mismatch: {s:?} vs batch={batch} heads={heads}"
        );
        let (seq, d_head) = (s[1], s[2]);
        let src = self.value(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let to = (b * seq + t) * heads * d_head + h * d_head;
                    let from = ((b * heads + h) * seq + t) * d_head;
                    out[to..to + d_head].copy_from_slice(&src[from..from + d_head]);
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![batch * seq, heads * d_head], out, Op::MergeHeads { a, batch, seq, heads, d_head }, ng))
    }

    /// Adds [`MASK_VALUE`] above the diagonal of each trailing `[seq, seq]` block.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let r = s.len();
        ensure!(r >= 2 && s[r - 1] == s[r - 2], "causal_mask needs square trailing axes, got {s:?}");
        let t = s[r - 1];
        let mut out = self.value(a).to_vec();
        for block in out.chunks_exact_mut(t * t) {
            for i in 0..t {
                for j in i + 1..t {
                    block[i * t + j] += MASK_VALUE;
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(s, out, Op::CausalMask(a), ng))
    }

    fn reduce(&mut self, a: Var, value: f32, op: Op) -> Var {
        let ng = self.ng(a);
        self.push(vec![1], vec![value], op, ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.reduce(a, s, Op::Sum(a))
    }

    pub fn l1_norm(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|x| x.abs()).sum();
        self.reduce(a, s, Op::L1Norm(a))
    }

    pub fn l2_norm(&mut self, a: Var) -> Var {
        let s = libm::sqrtf(self.value(a).iter().map(|x| x * x).sum());
        self.reduce(a, s, Op::L2Norm(a))
    }

    /// Picks `a[i, idx[i]]` from each row of a rank-2 tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        ensure!(
            s.len() == 2 && s[0] == idx.len(),
            "gather shape mismatch: {s:?} vs {} indices",
            idx.len()
        );
        ensure!(idx.iter().all(|&j| j < s[1]), "gather index out of range for {s:?}");
        let value = idx.iter().enumerate().map(|(i, &j)| self.value(a)[i * s[1] + j]).collect();
        let ng = self.ng(a);
        Ok(self.push(vec![idx.len()], value, Op::Gather { a, idx: idx.to_vec() }, ng))
    }

    /// Sums entries of a vector into `n_groups` buckets; `None` entries are dropped.
    pub fn group_sum(&mut self, a: Var, groups: &[Option<usize>], n_groups: usize) -> Result<Var> {
        ensure!(
            self.value(a).len() == groups.len(),
            "group_sum shape mismatch: {:?} vs {} group labels",
            self.shape(a),
            groups.len()
        );
        ensure!(n_groups > 0, "group_sum needs at least one group");
        let mut out = vec![0.0; n_groups];
        for (&x, g) in self.value(a).iter().zip(groups) {
            if let Some(g) = *g {
                ensure!(g < n_groups, "group {g} out of range ({n_groups} groups)");
                out[g] += x;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![n_groups], out, Op::GroupSum { a, groups: groups.to_vec() }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n = check_shape(shape)?;
        ensure!(n == self.value(a).len(), "cannot reshape {:?} into {shape:?}", self.shape(a));
        let value = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), ng))
    }

    // ----------------------------------------------------------------------
    // Reverse sweep
    // ----------------------------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        ensure!(
            self.value(loss).len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        if !self.ng(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        // Takes the parent's gradient buffer out (allocating on first use),
        // lets the body accumulate into it, and puts it back.
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if self.ng($v) {
                    let v: Var = $v;
                    let mut owned = grads[v.0].take().unwrap_or_else(|| vec![0.0; self.value(v).len()]);
                    {
                        let $buf: &mut Vec<f32> = &mut owned;
                        $body
                    }
                    grads[v.0] = Some(owned);
                }
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                with_grad!(a, |ga| {
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bo = &bv[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            gemm_nn(gc, bo, out, m, n, k);
                        } else {
                            gemm_nt(gc, bo, out, m, n, k);
                        }
                    }
                });
                with_grad!(b, |gb| {
                    for bi in 0..batch {
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let ao = &av[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            gemm_tn(gc, ao, out, m, n, k);
                        } else {
                            gemm_tn(ao, gc, out, m, k, n);
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                with_grad!(a, |ga| { axpy(ga, g, 1.0) });
                with_grad!(b, |gb| { axpy(gb, g, 1.0) });
            }
            &Op::Sub(a, b) => {
                with_grad!(a, |ga| { axpy(ga, g, 1.0) });
                with_grad!(b, |gb| { axpy(gb, g, -1.0) });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                with_grad!(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                with_grad!(b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::AddRow(a, r) => {
                let n = self.value(r).len();
                with_grad!(a, |ga| { axpy(ga, g, 1.0) });
                with_grad!(r, |gr| {
                    for row in g.chunks_exact(n) {
                        axpy(gr, row, 1.0);
                    }
                });
            }
            &Op::MulRow(a, r) => {
                let (av, rv) = (self.value(a), self.value(r));
                let n = rv.len();
                with_grad!(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * rv[i % n];
                    }
                });
                with_grad!(r, |gr| {
                    for i in 0..g.len() {
                        gr[i % n] += g[i] * av[i];
                    }
                });
            }
            &Op::Scale(a, c) => with_grad!(a, |ga| { axpy(ga, g, c) }),
            &Op::AddScalar(a) | &Op::CausalMask(a) | &Op::Reshape(a) => with_grad!(a, |ga| { axpy(ga, g, 1.0) }),
            &Op::Softmax(a) => {
                let n = cols(&node.shape);
                with_grad!(a, |ga| {
                    for ((yr, gr), out) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax(a) => {
                let n = cols(&node.shape);
                with_grad!(a, |ga| {
                    for ((yr, gr), out) in y.chunks_exact(n).zip(g.chunks_exact(n)).zip(ga.chunks_exact_mut(n)) {
                        let total: f32 = gr.iter().sum();
                        for j in 0..n {
                            out[j] += gr[j] - libm::expf(yr[j]) * total;
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let n = cols(&node.shape);
                let (xv, gv) = (self.value(x), self.value(gain));
                with_grad!(gain, |gg| {
                    for (r, (xr, gr)) in xv.chunks_exact(n).zip(g.chunks_exact(n)).enumerate() {
                        for j in 0..n {
                            gg[j] += gr[j] * xr[j] * inv_rms[r];
                        }
                    }
                });
                with_grad!(x, |gx| {
                    for (r, ((xr, gr), out)) in
                        xv.chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)).enumerate()
                    {
                        let inv = inv_rms[r];
                        // d(x_hat) = g * gain; dx = inv * (d(x_hat) - x_hat * mean(d(x_hat) * x_hat))
                        let mut dot = 0.0;
                        for j in 0..n {
                            dot += gr[j] * gv[j] * xr[j] * inv;
                        }
                        let mean = dot / n as f32;
                        for j in 0..n {
                            out[j] += inv * (gr[j] * gv[j] - xr[j] * inv * mean);
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = cols(&node.shape);
                with_grad!(*table, |gt| {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d], 1.0);
                    }
                });
            }
            Op::Concat { parts } => {
                let total = cols(&node.shape);
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = cols(self.shape(p));
                    with_grad!(p, |gp| {
                        for r in 0..rows {
                            axpy(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w], 1.0);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SplitHeads { a, batch, seq, heads, d_head } => with_grad!(a, |ga| {
                for b in 0..batch {
                    for t in 0..seq {
                        for h in 0..heads {
                            let src = (b * seq + t) * heads * d_head + h * d_head;
                            let dst = ((b * heads + h) * seq + t) * d_head;
                            axpy(&mut ga[src..src + d_head], &g[dst..dst + d_head], 1.0);
                        }
                    }
                }
            }),
            &Op::MergeHeads { a, batch, seq, heads, d_head } => with_grad!(a, |ga| {
                for b in 0..batch {
                    for t in 0..seq {
                        for h in 0..heads {
                            let dst = (b * seq + t) * heads * d_head + h * d_head;
                            let src = ((b * heads + h) * seq + t) * d_head;
                            axpy(&mut ga[src..src + d_head], &g[dst..dst + d_head], 1.0);
                        }
                    }
                }
            }),
            &Op::Log(a) => {
                let av = self.value(a);
                with_grad!(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / av[i];
                    }
                });
            }
            &Op::Exp(a) => with_grad!(a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i];
                }
            }),
            &Op::Sigmoid(a) => with_grad!(a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            &Op::LogSigmoid(a) => {
                let av = self.value(a);
                with_grad!(a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(-av[i]);
                    }
                });
            }
            &Op::Relu(a) => {
                let av = self.value(a);
                with_grad!(a, |ga| {
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            &Op::Sum(a) => with_grad!(a, |ga| { ga.iter_mut().for_each(|x| *x += g[0]) }),
            &Op::L1Norm(a) => {
                let av = self.value(a);
                with_grad!(a, |ga| {
                    for i in 0..ga.len() {
                        // Subgradient 0 at the kink.
                        if av[i] > 0.0 {
                            ga[i] += g[0];
                        } else if av[i] < 0.0 {
                            ga[i] -= g[0];
                        }
                    }
                });
            }
            &Op::L2Norm(a) => {
                let av = self.value(a);
                let norm = y[0];
                if norm > 0.0 {
                    with_grad!(a, |ga| { axpy(ga, av, g[0] / norm) });
                }
            }
            Op::Gather { a, idx } => {
                let n = cols(self.shape(*a));
                with_grad!(*a, |ga| {
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * n + j] += g[i];
                    }
                });
            }
            Op::GroupSum { a, groups } => with_grad!(*a, |ga| {
                for (i, grp) in groups.iter().enumerate() {
                    if let Some(k) = *grp {
                        ga[i] += g[k];
                    }
                }
            }),
        }
    }
}

// --------------------------------------------------------------------------
// Scalar helpers and kernels
// --------------------------------------------------------------------------

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f32) -> f32 {
    // log(sigmoid(x)) = -softplus(-x)
    if x >= 0.0 {
        -libm::log1pf(libm::expf(-x))
    } else {
        x - libm::log1pf(libm::expf(x))
    }
}

pub(crate) fn softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = libm::expf(v - max);
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub(crate) fn log_softmax_row(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let total: f32 = x.iter().map(|&v| libm::expf(v - max)).sum();
    let lse = max + libm::logf(total);
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

fn axpy(y: &mut [f32], x: &[f32], alpha: f32) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
fn gemm_nn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
fn gemm_nt(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
fn gemm_tn(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}
