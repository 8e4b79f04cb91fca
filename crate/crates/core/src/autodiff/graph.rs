//! Define-by-run computation graph.
//!
//! Every primitive appends one node holding its forward value. The node
//! list is the tape: inputs always precede outputs, so [`Graph::backward`]
//! replays it in reverse to accumulate vector-Jacobian products. A fresh
//! graph is built for every forward pass.

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Additive attention-mask sentinel. Large enough that `exp` underflows
/// to exactly zero after max-subtraction, while avoiding `-inf - -inf`.
pub const MASK_SENTINEL: f64 = -1e30;

const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Relu(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    L2Normalize { input: Var, norms: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    StopGradient,
    AddMask(Var, Var),
    PairwiseSqDist(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when no gradient reached it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var` as a tensor, zero-filled when nothing reached it.
    pub fn wrt(&self, var: Var) -> Tensor {
        let shape = &self.shapes[var.0];
        match self.get(var) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, other, &[0, 0])),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[j] = x[src(j)]` for the permuted layout; returns the gathered data.
fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; out_shape.len()];
    for slot in out.iter_mut() {
        let src: usize = idx
            .iter()
            .zip(axes)
            .map(|(&i, &a)| i * in_strides[a])
            .sum();
        *slot = data[src];
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (value, deriv)
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn binary_elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(name, va, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(va.shape().to_vec(), data).expect("same length");
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, |x| gelu_parts(x).0, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Identity forward, no gradient backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::StopGradient, false)
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", va)?;
        let (k2, n) = matrix_dims("matmul", vb)?;
        if k != k2 {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[g×m×k] · [g×k×n] → [g×m×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (g, m, k, n) = match (va.shape(), vb.shape()) {
            ([g, m, k], [g2, k2, n]) if g == g2 && k == k2 => (*g, *m, *k, *n),
            _ => return Err(Error::shape("batch_matmul", va.shape(), vb.shape())),
        };
        let mut out = vec![0.0; g * m * n];
        for ((oa, ob), oc) in va
            .data()
            .chunks(m * k)
            .zip(vb.data().chunks(k * n))
            .zip(out.chunks_mut(m * n))
        {
            gemm(m, k, n, oa, false, ob, false, oc, false);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![g, m, n], out)?,
            Op::BatchMatMul(a, b),
            rg,
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let mut seen = vec![false; va.ndim()];
        if axes.len() != va.ndim() {
            return Err(Error::shape("permute", va.shape(), axes));
        }
        for &ax in axes {
            if ax >= seen.len() || seen[ax] {
                return Err(Error::shape("permute", va.shape(), axes));
            }
            seen[ax] = true;
        }
        let (shape, data) = permute_data(va.data(), va.shape(), axes);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Permute(a, axes.to_vec()), rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let nd = self.value(a).ndim();
        if nd < 2 {
            return Err(Error::shape("transpose", self.shape(a), &[0, 0]));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let cols = va.last_dim();
        if vr.len() != cols || vr.ndim() != 1 {
            return Err(Error::shape(name, va.shape(), vr.shape()));
        }
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (x, &r) in chunk.iter_mut().zip(vr.data()) {
                *x = f(*x, r);
            }
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(value, op, rg))
    }

    /// Adds a length-`n` vector to every last-axis slice (bias add).
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, bias, |x, r| x + r, Op::AddRow(a, bias))
    }

    /// Multiplies every last-axis slice elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, gain, |x, r| x * r, Op::MulRow(a, gain))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance
    /// (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.last_dim();
        let mut data = va.data().to_vec();
        let mut inv_std = Vec::with_capacity(va.outer_len());
        for chunk in data.chunks_mut(cols) {
            let mean = chunk.iter().sum::<f64>() / cols as f64;
            let var = chunk.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in chunk.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv_std.push(r);
        }
        let value = Tensor::new(va.shape().to_vec(), data).expect("same length");
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { input: a, inv_std }, rg)
    }

    fn stable_rows(&self, a: Var, log_space: bool) -> Result<Tensor> {
        let va = self.value(a);
        let cols = va.last_dim();
        if cols == 0 {
            return Err(Error::shape("softmax", va.shape(), &[1]));
        }
        let mut data = va.data().to_vec();
        for (row, chunk) in data.chunks_mut(cols).enumerate() {
            let max = chunk
                .iter()
                .copied()
                .filter(|x| x.is_finite())
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateRow { row });
            }
            let mut total = 0.0;
            for x in chunk.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            if log_space {
                let lse = total.ln();
                for (x, &orig) in chunk.iter_mut().zip(&va.data()[row * cols..(row + 1) * cols]) {
                    *x = orig - max - lse;
                }
            } else {
                for x in chunk.iter_mut() {
                    *x /= total;
                }
            }
        }
        Tensor::new(va.shape().to_vec(), data)
    }

    /// Softmax over the last axis. `-inf` (or [`MASK_SENTINEL`]) entries map
    /// to exactly zero; a row without any finite entry is an error.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let value = self.stable_rows(a, false)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn log_softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let value = self.stable_rows(a, true)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let total: f64 = va.data().iter().sum();
        let mean = total / va.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(mean), Op::Mean(a), rg)
    }

    /// Scales each last-axis slice to unit Euclidean norm.
    pub fn l2_normalize_lastdim(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.last_dim();
        let mut data = va.data().to_vec();
        let mut norms = Vec::with_capacity(va.outer_len());
        for chunk in data.chunks_mut(cols) {
            let norm = chunk.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
            for x in chunk.iter_mut() {
                *x /= norm;
            }
            norms.push(norm);
        }
        let value = Tensor::new(va.shape().to_vec(), data).expect("same length");
        let rg = self.rg(a);
        self.push(value, Op::L2Normalize { input: a, norms }, rg)
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = matrix_dims("gather_rows", va)?;
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::shape("gather_rows", va.shape(), &[i]));
            }
            data.extend_from_slice(va.row(i));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, indices.to_vec()), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", &[], &[]))?;
        let cols = matrix_dims("concat_rows", self.value(*first))?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let vp = self.value(p);
            let (r, c) = matrix_dims("concat_rows", vp)?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(*first), vp.shape()));
            }
            data.extend_from_slice(vp.data());
            rows += r;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Adds an `n×n` mask to every trailing `n×n` slice of `scores`.
    pub fn add_mask(&mut self, scores: Var, mask: Var) -> Result<Var> {
        let (vs, vm) = (self.value(scores), self.value(mask));
        let (r, c) = matrix_dims("add_mask", vm)?;
        let sh = vs.shape();
        if sh.len() < 2 || sh[sh.len() - 2] != r || sh[sh.len() - 1] != c {
            return Err(Error::shape("add_mask", sh, vm.shape()));
        }
        let mut data = vs.data().to_vec();
        for slice in data.chunks_mut(r * c) {
            for (x, &m) in slice.iter_mut().zip(vm.data()) {
                *x += m;
            }
        }
        let value = Tensor::new(sh.to_vec(), data)?;
        let rg = self.rg(scores) || self.rg(mask);
        Ok(self.push(value, Op::AddMask(scores, mask), rg))
    }

    /// `out[i][j] = ‖a_i − b_j‖²` for `a: [A×D]`, `b: [B×D]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (na, d) = matrix_dims("pairwise_sq_dist", va)?;
        let (nb, d2) = matrix_dims("pairwise_sq_dist", vb)?;
        if d != d2 {
            return Err(Error::shape("pairwise_sq_dist", va.shape(), vb.shape()));
        }
        let mut out = Vec::with_capacity(na * nb);
        for i in 0..na {
            let ai = va.row(i);
            for j in 0..nb {
                let bj = vb.row(j);
                out.push(ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![na, nb], out)?,
            Op::PairwiseSqDist(a, b),
            rg,
        ))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::shape("backward", out.shape(), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if !self.rg(output) {
            return Ok(Gradients { grads, shapes });
        }
        grads[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &dy, &mut grads);
            }
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        let y = node.value.data();

        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*b, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(vb) {
                        *g += d * x;
                    }
                });
                acc(*b, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(va) {
                        *g += d * x;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d * s));
            }
            Op::Exp(a) => {
                acc(*a, &mut |g| {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                        *g += d * y;
                    }
                });
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for ((g, d), x) in g.iter_mut().zip(dy).zip(x) {
                        *g += d / x;
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for ((g, d), &x) in g.iter_mut().zip(dy).zip(x) {
                        *g += d * gelu_parts(x).1;
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &mut |g| {
                    for ((g, d), &x) in g.iter_mut().zip(dy).zip(x) {
                        if x > 0.0 {
                            *g += d;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = dY · Bᵀ, dB = Aᵀ · dY
                acc(*a, &mut |g| gemm(m, n, k, dy, false, vb.data(), true, g, true));
                acc(*b, &mut |g| gemm(k, m, n, va.data(), true, dy, false, g, true));
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bsz, m, k) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let n = vb.shape()[2];
                acc(*a, &mut |g| {
                    for i in 0..bsz {
                        gemm(
                            m,
                            n,
                            k,
                            &dy[i * m * n..(i + 1) * m * n],
                            false,
                            &vb.data()[i * k * n..(i + 1) * k * n],
                            true,
                            &mut g[i * m * k..(i + 1) * m * k],
                            true,
                        );
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..bsz {
                        gemm(
                            k,
                            m,
                            n,
                            &va.data()[i * m * k..(i + 1) * m * k],
                            true,
                            &dy[i * m * n..(i + 1) * m * n],
                            false,
                            &mut g[i * k * n..(i + 1) * k * n],
                            true,
                        );
                    }
                });
            }
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                let (_, back) = permute_data(dy, node.value.shape(), &inverse);
                acc(*a, &mut |g| g.iter_mut().zip(&back).for_each(|(g, d)| *g += d));
            }
            Op::Reshape(a) => {
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
            }
            Op::AddRow(a, r) => {
                let cols = node.value.last_dim();
                acc(*a, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*r, &mut |g| {
                    for chunk in dy.chunks(cols) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let cols = node.value.last_dim();
                let (va, vr) = (self.value(*a).data(), self.value(*r).data());
                acc(*a, &mut |g| {
                    for (gc, dc) in g.chunks_mut(cols).zip(dy.chunks(cols)) {
                        for ((g, d), s) in gc.iter_mut().zip(dc).zip(vr) {
                            *g += d * s;
                        }
                    }
                });
                acc(*r, &mut |g| {
                    for (dc, xc) in dy.chunks(cols).zip(va.chunks(cols)) {
                        for ((g, d), x) in g.iter_mut().zip(dc).zip(xc) {
                            *g += d * x;
                        }
                    }
                });
            }
            Op::LayerNorm { input, inv_std } => {
                let cols = node.value.last_dim();
                let n = cols as f64;
                acc(*input, &mut |g| {
                    for (((gc, dc), yc), r) in g
                        .chunks_mut(cols)
                        .zip(dy.chunks(cols))
                        .zip(y.chunks(cols))
                        .zip(inv_std)
                    {
                        let mean_d = dc.iter().sum::<f64>() / n;
                        let mean_dy = dc.iter().zip(yc).map(|(d, y)| d * y).sum::<f64>() / n;
                        for ((g, d), yv) in gc.iter_mut().zip(dc).zip(yc) {
                            *g += r * (d - mean_d - yv * mean_dy);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let cols = node.value.last_dim();
                acc(*a, &mut |g| {
                    for ((gc, dc), yc) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: f64 = dc.iter().zip(yc).map(|(d, y)| d * y).sum();
                        for ((g, d), yv) in gc.iter_mut().zip(dc).zip(yc) {
                            *g += yv * (d - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let cols = node.value.last_dim();
                acc(*a, &mut |g| {
                    for ((gc, dc), yc) in g.chunks_mut(cols).zip(dy.chunks(cols)).zip(y.chunks(cols)) {
                        let total: f64 = dc.iter().sum();
                        for ((g, d), yv) in gc.iter_mut().zip(dc).zip(yc) {
                            *g += d - yv.exp() * total;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|g| *g += dy[0] / n));
            }
            Op::L2Normalize { input, norms } => {
                let cols = node.value.last_dim();
                acc(*input, &mut |g| {
                    for (((gc, dc), yc), norm) in g
                        .chunks_mut(cols)
                        .zip(dy.chunks(cols))
                        .zip(y.chunks(cols))
                        .zip(norms)
                    {
                        let dot: f64 = dc.iter().zip(yc).map(|(d, y)| d * y).sum();
                        for ((g, d), yv) in gc.iter_mut().zip(dc).zip(yc) {
                            *g += (d - yv * dot) / norm;
                        }
                    }
                });
            }
            Op::GatherRows(a, indices) => {
                let cols = node.value.last_dim();
                acc(*a, &mut |g| {
                    for (dc, &i) in dy.chunks(cols).zip(indices) {
                        g[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(dc)
                            .for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    let part = &dy[offset..offset + len];
                    acc(p, &mut |g| g.iter_mut().zip(part).for_each(|(g, d)| *g += d));
                    offset += len;
                }
            }
            Op::AddMask(s, m) => {
                let mlen = self.value(*m).len();
                acc(*s, &mut |g| g.iter_mut().zip(dy).for_each(|(g, d)| *g += d));
                acc(*m, &mut |g| {
                    for chunk in dy.chunks(mlen) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (na, d) = (va.shape()[0], va.shape()[1]);
                let nb = vb.shape()[0];
                acc(*a, &mut |g| {
                    for i in 0..na {
                        for j in 0..nb {
                            let w = 2.0 * dy[i * nb + j];
                            for p in 0..d {
                                g[i * d + p] += w * (va.data()[i * d + p] - vb.data()[j * d + p]);
                            }
                        }
                    }
                });
                acc(*b, &mut |g| {
                    for i in 0..na {
                        for j in 0..nb {
                            let w = 2.0 * dy[i * nb + j];
                            for p in 0..d {
                                g[j * d + p] -= w * (va.data()[i * d + p] - vb.data()[j * d + p]);
                            }
                        }
                    }
                });
            }
        }
    }
}
