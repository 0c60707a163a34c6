use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which off-diagonal set of an `I x I` block is averaged by
/// [`Tape::masked_mean`].
///
/// For entry `(i, j)` (receiver row `i`, transmitter column `j`):
/// `SameTransmitter` averages column `j` without row `i`, `SameReceiver`
/// averages row `i` without column `j`, and `Unrelated` averages every entry
/// outside both row `i` and column `j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskedSet {
    SameTransmitter,
    SameReceiver,
    Unrelated,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatmulFirst(Var, Var),
    AddBiasFirst(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Ln(Var),
    Log10(Var),
    MaxScalar(Var, f64),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Narrow(Var, usize),
    MaskedMean(Var, MaskedSet),
    LeftMat(Var, Tensor),
    RightMat(Var, Tensor),
    Diag(Var),
    SumAll(Var),
    SumLast(Var),
    Reshape(Var),
    Broadcast(Var),
    Rows(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records tensor operations for one forward pass and replays them in
/// reverse to accumulate gradients.
///
/// Nodes are appended in evaluation order, so the node index is a
/// topological order and the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every leaf of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no path connects it to the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`; unreachable nodes get zeros of the right shape.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn square_tail(op: &'static str, shape: &[usize]) -> Result<usize> {
    let r = shape.len();
    if r < 2 || shape[r - 1] != shape[r - 2] {
        return Err(mismatch(op, shape, &[]));
    }
    Ok(shape[r - 1])
}

/// Applies the masked mean to every trailing `n x n` block of `src`.
/// The operator is symmetric, so the same routine serves as its adjoint.
fn masked_mean_blocks(src: &[f64], n: usize, set: MaskedSet, out: &mut [f64]) {
    let block = n * n;
    if n < 2 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let m = (n - 1) as f64;
    let mut row = vec![0.0; n];
    let mut col = vec![0.0; n];
    for (x, y) in src.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        row.iter_mut().for_each(|v| *v = 0.0);
        col.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let v = x[i * n + j];
                row[i] += v;
                col[j] += v;
            }
        }
        for r in &row {
            total += r;
        }
        for i in 0..n {
            for j in 0..n {
                let v = x[i * n + j];
                y[i * n + j] = match set {
                    MaskedSet::SameTransmitter => (col[j] - v) / m,
                    MaskedSet::SameReceiver => (row[i] - v) / m,
                    MaskedSet::Unrelated => (total - row[i] - col[j] + v) / (m * m),
                };
            }
        }
    }
}

/// `out_block = a * x_block` (`left == true`) or `x_block * a` for each
/// trailing `n x n` block.
fn block_matmul(x: &[f64], a: &[f64], n: usize, left: bool, out: &mut [f64]) {
    let block = n * n;
    for (xb, yb) in x.chunks_exact(block).zip(out.chunks_exact_mut(block)) {
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += if left {
                        a[i * n + k] * xb[k * n + j]
                    } else {
                        xb[i * n + k] * a[k * n + j]
                    };
                }
                yb[i * n + j] = acc;
            }
        }
    }
}

fn transpose(a: &Tensor) -> Tensor {
    let n = a.shape()[0];
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            t.set(&[j, i], a.at(&[i, j]));
        }
    }
    t
}

/// `c[m x n] (+)= a[m x k] * b[k x n]` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents match (m, k, n) and the
    // given strides; the output is a dense row-major m x n slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn broadcast_strides(input: &[usize], target: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; input.len()];
    let mut acc = 1;
    for d in (0..input.len()).rev() {
        strides[d] = if input[d] == 1 && target[d] != 1 { 0 } else { acc };
        acc *= input[d];
    }
    strides
}

/// Visits `(output_offset, input_offset)` pairs of a broadcast.
fn for_each_broadcast(target: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = target.iter().product();
    let mut idx = vec![0usize; target.len()];
    for out in 0..total {
        let inp: usize = idx.iter().zip(strides).map(|(i, s)| i * s).sum();
        f(out, inp);
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// `W • X`: multiplies `w [o, d]` into every first-dimension vector of
    /// `x [d, ...]`, giving `[o, ...]`.
    pub fn matmul_first(&mut self, w: Var, x: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.is_empty() || ws[1] != xs[0] {
            return Err(mismatch("matmul_first", &ws, &xs));
        }
        let (o, d) = (ws[0], ws[1]);
        let n: usize = xs[1..].iter().product();
        let mut out = vec![0.0; o * n];
        gemm(
            o,
            d,
            n,
            self.value(w).data(),
            (d as isize, 1),
            self.value(x).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let mut shape = xs;
        shape[0] = o;
        let ng = self.ng(w) || self.ng(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatmulFirst(w, x), ng))
    }

    /// Adds `b [o]` along the first dimension of `x [o, ...]`.
    pub fn add_bias_first(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if bs.len() != 1 || xs.is_empty() || xs[0] != bs[0] {
            return Err(mismatch("add_bias_first", &xs, &bs));
        }
        let n: usize = xs[1..].iter().product();
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (row, &bv) in out.data_mut().chunks_exact_mut(n.max(1)).zip(&bias) {
            row.iter_mut().for_each(|v| *v += bv);
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddBiasFirst(x, b), ng))
    }

    /// `W • X + b`.
    pub fn affine(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let y = self.matmul_first(w, x)?;
        self.add_bias_first(y, b)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| c * v);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, c), ng)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(t, Op::AddScalar(x), ng)
    }

    /// Elementwise ReLU; the derivative at exactly zero is taken as 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    /// Natural logarithm.
    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::ln);
        let ng = self.ng(x);
        self.push(t, Op::Ln(x), ng)
    }

    pub fn log10(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::log10);
        let ng = self.ng(x);
        self.push(t, Op::Log10(x), ng)
    }

    /// `max(x, c)`; ties pass no gradient.
    pub fn max_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| if v > c { v } else { c });
        let ng = self.ng(x);
        self.push(t, Op::MaxScalar(x, c), ng)
    }

    /// Projection onto `[lo, hi]`; the gradient is 1 strictly inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(t, Op::Clamp(x, lo, hi), ng)
    }

    /// Concatenates along the first dimension.
    pub fn concat_first(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidConfig("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(mismatch("concat_first", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Rows `start..start + len` of the first dimension.
    pub fn narrow_first(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || start + len > xs[0] {
            return Err(mismatch("narrow_first", &xs, &[start, len]));
        }
        let inner: usize = xs[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = xs;
        shape[0] = len;
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Narrow(x, start), ng))
    }

    /// Mean over a masked set of every trailing `I x I` block. With `I = 1`
    /// the set is empty and the result is zero.
    pub fn masked_mean(&mut self, x: Var, set: MaskedSet) -> Result<Var> {
        let n = square_tail("masked_mean", self.shape(x))?;
        let src = self.value(x);
        let mut out = Tensor::zeros(src.shape());
        masked_mean_blocks(src.data(), n, set, out.data_mut());
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskedMean(x, set), ng))
    }

    /// `P ∘ X`: left-multiplies every trailing block by the constant `p`.
    pub fn left_mat(&mut self, p: &Tensor, x: Var) -> Result<Var> {
        let n = square_tail("left_mat", self.shape(x))?;
        if p.shape() != [n, n] {
            return Err(mismatch("left_mat", p.shape(), self.shape(x)));
        }
        let mut out = Tensor::zeros(self.shape(x));
        block_matmul(self.value(x).data(), p.data(), n, true, out.data_mut());
        let ng = self.ng(x);
        Ok(self.push(out, Op::LeftMat(x, p.clone()), ng))
    }

    /// `X ∘ P`: right-multiplies every trailing block by the constant `p`.
    pub fn right_mat(&mut self, x: Var, p: &Tensor) -> Result<Var> {
        let n = square_tail("right_mat", self.shape(x))?;
        if p.shape() != [n, n] {
            return Err(mismatch("right_mat", self.shape(x), p.shape()));
        }
        let mut out = Tensor::zeros(self.shape(x));
        block_matmul(self.value(x).data(), p.data(), n, false, out.data_mut());
        let ng = self.ng(x);
        Ok(self.push(out, Op::RightMat(x, p.clone()), ng))
    }

    /// Diagonal of every trailing block: `[..., I, I] -> [..., I]`.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = square_tail("diag", &xs)?;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks_exact(n * n)
            .flat_map(|b| (0..n).map(move |i| b[i * n + i]))
            .collect();
        let shape = xs[..xs.len() - 1].to_vec();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Diag(x), ng))
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last dimension.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().ok_or_else(|| mismatch("sum_last", &xs, &[]))?;
        let data = self
            .value(x)
            .data()
            .chunks_exact(n.max(1))
            .map(|c| c.iter().sum())
            .collect();
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(xs[..xs.len() - 1].to_vec(), data)?, Op::SumLast(x), ng))
    }

    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1) as f64;
        let s = self.sum_last(x)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Expands size-1 dimensions of `x` to `shape` (same rank).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != shape.len() || xs.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
            return Err(mismatch("broadcast_to", &xs, shape));
        }
        let strides = broadcast_strides(&xs, shape);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(shape);
        let dst = out.data_mut();
        for_each_broadcast(shape, &strides, |o, i| dst[o] = src[i]);
        let ng = self.ng(x);
        Ok(self.push(out, Op::Broadcast(x), ng))
    }

    /// Applies a scalar function to every last-dimension row of `x`.
    ///
    /// The caller evaluates the function outside the tape and supplies
    /// `values` (shape of `x` without the last dimension) and
    /// `local_grads` (shape of `x`, the gradient of each row's value with
    /// respect to that row).
    pub fn rows(&mut self, x: Var, values: Tensor, local_grads: Tensor) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if local_grads.shape() != xs.as_slice() || xs.is_empty() || values.shape() != &xs[..xs.len() - 1] {
            return Err(mismatch("rows", &xs, values.shape()));
        }
        let ng = self.ng(x);
        Ok(self.push(values, Op::Rows(x, local_grads), ng))
    }

    /// Hash of every branch decision (ReLU, max, clamp) taken on this tape.
    /// Two evaluations with equal signatures lie in the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            let (x, pick): (Var, Box<dyn Fn(f64) -> u8>) = match node.op {
                Op::Relu(x) => (x, Box::new(|v| (v > 0.0) as u8)),
                Op::MaxScalar(x, c) => (x, Box::new(move |v| (v > c) as u8)),
                Op::Clamp(x, lo, hi) => (x, Box::new(move |v| (v > lo) as u8 + 2 * (v < hi) as u8)),
                _ => continue,
            };
            for &v in self.value(x).data() {
                pick(v).hash(&mut h);
            }
        }
        h.finish()
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, g, &mut grads)?;
        }
        // Only leaves keep their accumulated gradient.
        for (id, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.ng(to) {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.accumulate(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatmulFirst(w, x) => {
                let wv = self.value(*w);
                let xv = self.value(*x);
                let (o, d) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.len() / d.max(1);
                if self.ng(*w) {
                    let mut dw = vec![0.0; o * d];
                    gemm(o, n, d, g.data(), (n as isize, 1), xv.data(), (1, n as isize), 0.0, &mut dw);
                    self.send(grads, *w, Tensor::new(vec![o, d], dw)?);
                }
                if self.ng(*x) {
                    let mut dx = vec![0.0; d * n];
                    gemm(d, o, n, wv.data(), (1, d as isize), g.data(), (n as isize, 1), 0.0, &mut dx);
                    self.send(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
            }
            Op::AddBiasFirst(x, b) => {
                if self.ng(*b) {
                    let o = self.shape(*b)[0];
                    let n = g.len() / o.max(1);
                    let db = g.data().chunks_exact(n.max(1)).map(|c| c.iter().sum()).collect();
                    self.send(grads, *b, Tensor::vector(db));
                }
                self.send(grads, *x, g);
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.send(grads, *b, g.map(|v| -v));
                self.send(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.send(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.send(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Scale(x, c) => self.send(grads, *x, g.map(|v| c * v)),
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.send(grads, *x, g.reshape(&shape)?);
            }
            Op::Relu(x) => self.masked_send(grads, *x, g, |v| v > 0.0)?,
            Op::MaxScalar(x, c) => {
                let c = *c;
                self.masked_send(grads, *x, g, move |v| v > c)?
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.masked_send(grads, *x, g, move |v| v > lo && v < hi)?
            }
            Op::Ln(x) => {
                let xv = self.value(*x);
                let d = g.data().iter().zip(xv.data()).map(|(gv, v)| gv / v).collect();
                self.send(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Log10(x) => {
                let xv = self.value(*x);
                let k = std::f64::consts::LN_10;
                let d = g.data().iter().zip(xv.data()).map(|(gv, v)| gv / (v * k)).collect();
                self.send(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.ng(p) {
                        let d = g.data()[off..off + len].to_vec();
                        self.send(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                    off += len;
                }
            }
            Op::Narrow(x, start) => {
                let xs = self.shape(*x).to_vec();
                let inner: usize = xs[1..].iter().product();
                let mut d = Tensor::zeros(&xs);
                d.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.send(grads, *x, d);
            }
            Op::MaskedMean(x, set) => {
                let n = *out.shape().last().unwrap_or(&1);
                let mut d = Tensor::zeros(out.shape());
                masked_mean_blocks(g.data(), n, *set, d.data_mut());
                self.send(grads, *x, d);
            }
            Op::LeftMat(x, p) => {
                let n = p.shape()[0];
                let mut d = Tensor::zeros(out.shape());
                block_matmul(g.data(), transpose(p).data(), n, true, d.data_mut());
                self.send(grads, *x, d);
            }
            Op::RightMat(x, p) => {
                let n = p.shape()[0];
                let mut d = Tensor::zeros(out.shape());
                block_matmul(g.data(), transpose(p).data(), n, false, d.data_mut());
                self.send(grads, *x, d);
            }
            Op::Diag(x) => {
                let xs = self.shape(*x).to_vec();
                let n = xs[xs.len() - 1];
                let mut d = Tensor::zeros(&xs);
                for (blk, gv) in d.data_mut().chunks_exact_mut(n * n).zip(g.data().chunks_exact(n)) {
                    for i in 0..n {
                        blk[i * n + i] = gv[i];
                    }
                }
                self.send(grads, *x, d);
            }
            Op::SumAll(x) => {
                let xs = self.shape(*x).to_vec();
                self.send(grads, *x, Tensor::full(&xs, g.item()));
            }
            Op::SumLast(x) => {
                let xs = self.shape(*x).to_vec();
                let n = xs[xs.len() - 1];
                let d = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                self.send(grads, *x, Tensor::new(xs, d)?);
            }
            Op::Broadcast(x) => {
                let xs = self.shape(*x).to_vec();
                let strides = broadcast_strides(&xs, out.shape());
                let mut d = Tensor::zeros(&xs);
                let dst = d.data_mut();
                let src = g.data();
                for_each_broadcast(out.shape(), &strides, |o, i| dst[i] += src[o]);
                self.send(grads, *x, d);
            }
            Op::Rows(x, local) => {
                let n = *local.shape().last().unwrap_or(&1);
                let d = local
                    .data()
                    .chunks_exact(n.max(1))
                    .zip(g.data())
                    .flat_map(|(row, &gv)| row.iter().map(move |l| l * gv))
                    .collect();
                self.send(grads, *x, Tensor::new(local.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }

    fn masked_send(&self, grads: &mut [Option<Tensor>], x: Var, g: Tensor, pass: impl Fn(f64) -> bool) -> Result<()> {
        let xv = self.value(x);
        let d = g
            .data()
            .iter()
            .zip(xv.data())
            .map(|(&gv, &v)| if pass(v) { gv } else { 0.0 })
            .collect();
        self.send(grads, x, Tensor::new(g.shape().to_vec(), d)?);
        Ok(())
    }
}
