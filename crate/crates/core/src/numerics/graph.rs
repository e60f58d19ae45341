//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so insertion order is a valid
//! topological order and backward is a single reverse sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::tensor::{finish, numel};
use super::{NumericsError, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Silu,
    Sigmoid,
    Exp,
    Ln,
    Tanh,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    MulSuffix(Var, Var),
    Affine { x: Var, scale: f64 },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Gather { x: Var, index: Arc<Vec<isize>> },
    Concat { parts: Vec<Var>, axis: usize },
    Reduce { x: Var, map: Arc<Vec<usize>>, scale: f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Unary { x: Var, kind: Unary },
    Powf { x: Var, p: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    named: BTreeMap<String, Var>,
    track_params: bool,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c (+)= op(a) . op(b)` for one `m x k` by `k x n` product.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: the slices cover exactly the strided extents passed in.
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

/// Split `shape` around `axis` into (outer, len, inner).
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

impl Graph {
    /// Graph whose parameters receive gradients.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), named: BTreeMap::new(), track_params: true, grads: None }
    }

    /// Graph for pure evaluation: parameters are bound as constants.
    pub fn inference() -> Self {
        Graph { track_params: false, ..Graph::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn emit(&mut self, name: &'static str, shape: Vec<usize>, mut data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        finish(name, &mut data)?;
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(Tensor::from_parts(shape, data), op, rg))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.rounded(), Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t.rounded(), Op::Leaf, true)
    }

    /// Bind a named parameter; repeated binds of the same name share one node.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let v = self.push(t.clone().rounded(), Op::Leaf, self.track_params);
        self.named.insert(name.to_string(), v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                expected: self.shape(a).to_vec(),
                got: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        self.emit(name, self.shape(a).to_vec(), data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn check_suffix(&self, op: &'static str, x: Var, y: Var) -> Result<()> {
        let xs = self.shape(x);
        let ys = self.shape(y);
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != *ys {
            return Err(NumericsError::ShapeMismatch { op, expected: xs.to_vec(), got: ys.to_vec() });
        }
        Ok(())
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s (repeated over leading axes).
    pub fn add_suffix(&mut self, x: Var, y: Var) -> Result<Var> {
        self.check_suffix("add_suffix", x, y)?;
        let yv = self.value(y).data();
        let n = yv.len();
        let data = self.value(x).data().iter().enumerate().map(|(i, &a)| a + yv[i % n]).collect();
        self.emit("add_suffix", self.shape(x).to_vec(), data, Op::AddSuffix(x, y), &[x, y])
    }

    /// `x * y` where `y`'s shape is a suffix of `x`'s.
    pub fn mul_suffix(&mut self, x: Var, y: Var) -> Result<Var> {
        self.check_suffix("mul_suffix", x, y)?;
        let yv = self.value(y).data();
        let n = yv.len();
        let data = self.value(x).data().iter().enumerate().map(|(i, &a)| a * yv[i % n]).collect();
        self.emit("mul_suffix", self.shape(x).to_vec(), data, Op::MulSuffix(x, y), &[x, y])
    }

    /// `scale * x + shift` with constant scalars.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&a| scale * a + shift).collect();
        self.emit("affine", self.shape(x).to_vec(), data, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    /// Matrix product of rank-2 operands, or batched over a shared leading axis
    /// for rank-3 operands. `ta`/`tb` transpose the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || NumericsError::ShapeMismatch { op: "matmul", expected: sa.clone(), got: sb.clone() };
        if sa.len() != sb.len() || !(sa.len() == 2 || sa.len() == 3) {
            return Err(bad());
        }
        let r = sa.len();
        let batch = if r == 3 { sa[0] } else { 1 };
        if r == 3 && sb[0] != batch {
            return Err(bad());
        }
        let (m, ka) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
        let (kb, n) = if tb { (sb[r - 1], sb[r - 2]) } else { (sb[r - 2], sb[r - 1]) };
        if ka != kb {
            return Err(bad());
        }
        let k = ka;
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    ta,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let shape = if r == 3 { vec![batch, m, n] } else { vec![m, n] };
        self.emit("matmul", shape, out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).numel() || shape.iter().any(|&d| d == 0) {
            return Err(NumericsError::ShapeMismatch {
                op: "reshape",
                expected: shape.to_vec(),
                got: self.shape(x).to_vec(),
            });
        }
        let data = self.value(x).data().to_vec();
        self.emit("reshape", shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    /// Output element `i` is `x[index[i]]`, or zero where `index[i] < 0`.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<isize>>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != index.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "gather",
                expected: shape.to_vec(),
                got: vec![index.len()],
            });
        }
        let xv = self.value(x).data();
        let bound = xv.len();
        let mut data = Vec::with_capacity(index.len());
        for &j in index.iter() {
            if j < 0 {
                data.push(0.0);
            } else if (j as usize) < bound {
                data.push(xv[j as usize]);
            } else {
                return Err(NumericsError::OutOfRange { op: "gather", index: j as usize, bound });
            }
        }
        self.emit("gather", shape.to_vec(), data, Op::Gather { x, index }, &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(NumericsError::Invalid(format!("bad permutation {axes:?} for rank {r}")));
        }
        let in_strides = row_major_strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let n = numel(&shape);
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; r];
        for _ in 0..n {
            let src: usize = (0..r).map(|d| counter[d] * in_strides[axes[d]]).sum();
            index.push(src as isize);
            for d in (0..r).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(x, Arc::new(index), &out_shape)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(NumericsError::AxisOutOfRange { op: "transpose", axis: 1, rank: r });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    /// Elements `[start, end)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::AxisOutOfRange { op: "slice", axis, rank: shape.len() });
        }
        if start >= end || end > shape[axis] {
            return Err(NumericsError::OutOfRange { op: "slice", index: end, bound: shape[axis] });
        }
        let (outer, len, inner) = around_axis(&shape, axis);
        let mut index = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            for a in start..end {
                let base = (o * len + a) * inner;
                index.extend((base..base + inner).map(|j| j as isize));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        self.gather(x, Arc::new(index), &out_shape)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(NumericsError::Empty("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(NumericsError::AxisOutOfRange { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(NumericsError::ShapeMismatch { op: "concat", expected: base.clone(), got: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = around_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let v = self.value(p).data();
                data.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.emit("concat", shape, data, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    fn reduce(&mut self, name: &'static str, x: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if let Some(&a) = axes.iter().find(|&&a| a >= r) {
            return Err(NumericsError::AxisOutOfRange { op: name, axis: a, rank: r });
        }
        let kept: Vec<usize> = (0..r).filter(|d| !axes.contains(d)).collect();
        let mut out_shape: Vec<usize> = kept.iter().map(|&d| shape[d]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_strides = row_major_strides(&out_shape);
        let n = numel(&shape);
        let count = n / numel(&out_shape);
        let mut map = Vec::with_capacity(n);
        let mut counter = vec![0usize; r];
        for _ in 0..n {
            let dst: usize = if kept.is_empty() {
                0
            } else {
                kept.iter().enumerate().map(|(j, &d)| counter[d] * out_strides[j]).sum()
            };
            map.push(dst);
            for d in (0..r).rev() {
                counter[d] += 1;
                if counter[d] < shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        let scale = if mean { 1.0 / count as f64 } else { 1.0 };
        let mut data = vec![0.0; numel(&out_shape)];
        for (v, &dst) in self.value(x).data().iter().zip(&map) {
            data[dst] += v;
        }
        if mean {
            for v in &mut data {
                *v *= scale;
            }
        }
        self.emit(name, out_shape, data, Op::Reduce { x, map: Arc::new(map), scale }, &[x])
    }

    /// Sum over `axes`, dropping them (a full reduction yields shape `[1]`).
    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("sum", x, axes, false)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce("mean", x, axes, true)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::AxisOutOfRange { op: "softmax", axis, rank: shape.len() });
        }
        let (outer, len, inner) = around_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| xv[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..len {
                    let e = (xv[at(a)] - max).exp();
                    data[at(a)] = e;
                    total += e;
                }
                for a in 0..len {
                    data[at(a)] /= total;
                }
            }
        }
        self.emit("softmax", shape, data, Op::Softmax { x, axis }, &[x])
    }

    /// Normalize over the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xv = self.value(x).data();
        let rows = xv.len() / d;
        let mut data = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (o, v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
            inv_std.push(is);
        }
        self.emit("layer_norm", shape, data, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let f = |v: f64| match kind {
            Unary::Gelu => 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()),
            Unary::Silu => v * sigmoid(v),
            Unary::Sigmoid => sigmoid(v),
            Unary::Exp => v.exp(),
            Unary::Ln => v.ln(),
            Unary::Tanh => v.tanh(),
        };
        let name = match kind {
            Unary::Gelu => "gelu",
            Unary::Silu => "silu",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Ln => "ln",
            Unary::Tanh => "tanh",
        };
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.emit(name, self.shape(x).to_vec(), data, Op::Unary { x, kind }, &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Ln)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    /// `x^p` for a constant exponent; `x` must be positive unless `p` is a
    /// non-negative integer.
    pub fn powf(&mut self, x: Var, p: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| if p == 0.0 { 1.0 } else { v.powf(p) }).collect();
        self.emit("powf", self.shape(x).to_vec(), data, Op::Powf { x, p }, &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.clamp(lo, hi)).collect();
        self.emit("clamp", self.shape(x).to_vec(), data, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Reverse sweep from a single-element `loss`. Allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(NumericsError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, node.requires_grad) {
                    (Some(g), true) => Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
                    _ => None,
                }
            })
            .collect();
        self.grads = Some(out);
        Ok(())
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()])
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    for (d, s) in slot(grads, nodes, *a).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if wants(*b) {
                    for (d, s) in slot(grads, nodes, *b).iter_mut().zip(g) {
                        *d += sign * s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = val(*b);
                    for ((d, s), y) in slot(grads, nodes, *a).iter_mut().zip(g).zip(bv) {
                        *d += s * y;
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    for ((d, s), x) in slot(grads, nodes, *b).iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::AddSuffix(x, y) => {
                if wants(*x) {
                    for (d, s) in slot(grads, nodes, *x).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if wants(*y) {
                    let gy = slot(grads, nodes, *y);
                    let n = gy.len();
                    for (i, s) in g.iter().enumerate() {
                        gy[i % n] += s;
                    }
                }
            }
            Op::MulSuffix(x, y) => {
                let yv = val(*y);
                let n = yv.len();
                if wants(*x) {
                    for (i, (d, s)) in slot(grads, nodes, *x).iter_mut().zip(g).enumerate() {
                        *d += s * yv[i % n];
                    }
                }
                if wants(*y) {
                    let xv = val(*x);
                    let gy = slot(grads, nodes, *y);
                    for (i, s) in g.iter().enumerate() {
                        gy[i % n] += s * xv[i];
                    }
                }
            }
            Op::Affine { x, scale } => {
                if wants(*x) {
                    for (d, s) in slot(grads, nodes, *x).iter_mut().zip(g) {
                        *d += scale * s;
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let r = sa.len();
                let batch = if r == 3 { sa[0] } else { 1 };
                let (m, k) = if ta { (sa[r - 1], sa[r - 2]) } else { (sa[r - 2], sa[r - 1]) };
                let n = if tb { sb[r - 2] } else { sb[r - 1] };
                if wants(*a) {
                    let bv = val(*b);
                    let ga = slot(grads, nodes, *a);
                    for i in 0..batch {
                        let gc = &g[i * m * n..(i + 1) * m * n];
                        let bm = &bv[i * k * n..(i + 1) * k * n];
                        let da = &mut ga[i * m * k..(i + 1) * m * k];
                        if ta {
                            gemm(k, n, m, bm, tb, gc, true, da, true);
                        } else {
                            gemm(m, n, k, gc, false, bm, !tb, da, true);
                        }
                    }
                }
                if wants(*b) {
                    let av = val(*a);
                    let gb = slot(grads, nodes, *b);
                    for i in 0..batch {
                        let gc = &g[i * m * n..(i + 1) * m * n];
                        let am = &av[i * m * k..(i + 1) * m * k];
                        let db = &mut gb[i * k * n..(i + 1) * k * n];
                        if tb {
                            gemm(n, m, k, gc, true, am, ta, db, true);
                        } else {
                            gemm(k, m, n, am, !ta, gc, false, db, true);
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    for (d, s) in slot(grads, nodes, *x).iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Gather { x, index } => {
                if wants(*x) {
                    let gx = slot(grads, nodes, *x);
                    for (&j, s) in index.iter().zip(g) {
                        if j >= 0 {
                            gx[j as usize] += s;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = around_axis(shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.shape()[*axis];
                    if wants(p) {
                        let gp = slot(grads, nodes, p);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, s) in gp[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Reduce { x, map, scale } => {
                if wants(*x) {
                    for (d, &dst) in slot(grads, nodes, *x).iter_mut().zip(map.iter()) {
                        *d += scale * g[dst];
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if wants(*x) {
                    let y = node.value.data();
                    let (outer, len, inner) = around_axis(node.value.shape(), *axis);
                    let gx = slot(grads, nodes, *x);
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: f64 = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                gx[at(a)] += y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if wants(*x) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let gx = slot(grads, nodes, *x);
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &y[r * d..(r + 1) * d];
                        let mean_g = gr.iter().sum::<f64>() / d as f64;
                        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += is * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
            Op::Unary { x, kind } => {
                if wants(*x) {
                    let xv = val(*x);
                    let y = node.value.data();
                    let gx = slot(grads, nodes, *x);
                    for i in 0..g.len() {
                        let v = xv[i];
                        let dy = match kind {
                            Unary::Gelu => {
                                let u = GELU_C * (v + 0.044715 * v * v * v);
                                let t = u.tanh();
                                0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * v * v)
                            }
                            Unary::Silu => {
                                let s = sigmoid(v);
                                s + v * s * (1.0 - s)
                            }
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Exp => y[i],
                            Unary::Ln => 1.0 / v,
                            Unary::Tanh => 1.0 - y[i] * y[i],
                        };
                        gx[i] += g[i] * dy;
                    }
                }
            }
            Op::Powf { x, p } => {
                if wants(*x) && *p != 0.0 {
                    let xv = val(*x);
                    for ((d, s), v) in slot(grads, nodes, *x).iter_mut().zip(g).zip(xv) {
                        *d += s * p * v.powf(p - 1.0);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                if wants(*x) {
                    let xv = val(*x);
                    for ((d, s), v) in slot(grads, nodes, *x).iter_mut().zip(g).zip(xv) {
                        if *v >= *lo && *v <= *hi {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// Gradients of every bound parameter that received one, by name.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.named
            .iter()
            .filter_map(|(name, &v)| self.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.named.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
