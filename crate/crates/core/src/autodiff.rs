//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Operations
//! append nodes in execution order, so the node list is already a topological
//! order and [`Tape::backward`] is a single reverse sweep. A tape is rebuilt
//! for every forward pass.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{
    gelu_grad_scalar, gelu_scalar, matmul_nt_raw, matmul_raw, matmul_tn_raw, sigmoid_scalar,
    CsrMatrix, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Swish,
    Tanh,
    Sigmoid,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Swish => "swish",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast {
        x: Var,
        y: Var,
    },
    MulBcast {
        x: Var,
        y: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    ScaleVar {
        x: Var,
        s: Var,
    },
    Reshape {
        x: Var,
    },
    Unary {
        x: Var,
        act: Activation,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        d: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GroupNorm {
        x: Var,
        group: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<Option<usize>>,
        k: usize,
    },
    SpMM {
        adj: Arc<CsrMatrix>,
        x: Var,
        k: usize,
    },
    SliceLast {
        x: Var,
        start: usize,
        len: usize,
        width: usize,
    },
    ConcatLast {
        xs: Vec<Var>,
        widths: Vec<usize>,
    },
    SelectMid {
        x: Var,
        index: usize,
        mid: usize,
        inner: usize,
    },
    StackMid {
        xs: Vec<Var>,
        inner: usize,
    },
    Rotate {
        x: Var,
        table: Arc<RotationTable>,
        width: usize,
    },
    DecayKernel {
        gamma: Var,
        size: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-position cosine/sine tables for pairwise feature rotation.
///
/// Position `n` rotates feature pair `(2j, 2j+1)` by `n·θ_j`; an odd
/// trailing feature is left untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct RotationTable {
    pub positions: usize,
    pub pairs: usize,
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
}

impl RotationTable {
    pub fn new(positions: usize, thetas: &[f64]) -> Self {
        let pairs = thetas.len();
        let mut cos = Vec::with_capacity(positions * pairs);
        let mut sin = Vec::with_capacity(positions * pairs);
        for n in 0..positions {
            for &theta in thetas {
                let angle = n as f64 * theta;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        RotationTable {
            positions,
            pairs,
            cos,
            sin,
        }
    }

    /// Rotates `data` laid out as `[.., positions, width]` in place; `sign`
    /// of -1 applies the inverse rotation.
    pub fn apply(&self, data: &mut [f64], width: usize, sign: f64) {
        let span = self.positions * width;
        for block in data.chunks_mut(span) {
            for (n, row) in block.chunks_mut(width).enumerate() {
                for j in 0..self.pairs {
                    let c = self.cos[n * self.pairs + j];
                    let s = sign * self.sin[n * self.pairs + j];
                    let (x0, x1) = (row[2 * j], row[2 * j + 1]);
                    row[2 * j] = x0 * c - x1 * s;
                    row[2 * j + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
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

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// `a[.., k] · b[k, n]`, flattening the leading extents of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k.max(1);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Batched product `a[B,m,k] · b[B,k,n]`, or `a · bᵀ` with `b[B,n,k]`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("bmm", &sa, &sb);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let ci = if trans_b {
                matmul_nt_raw(ai, bi, m, k, n)
            } else {
                matmul_raw(ai, bi, m, k, n)
            };
            out.extend_from_slice(&ci);
        }
        let rg = self.rg(a) || self.rg(b);
        let op = Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.push(Tensor::new(&[batch, m, n], out)?, op, rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(name, sa, sb));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(sa, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn bcast_check(&self, x: Var, y: Var, name: &'static str) -> Result<usize> {
        let (sx, sy) = (self.shape(x), self.shape(y));
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != *sy {
            return Err(Error::shape(name, sx, sy));
        }
        Ok(self.value(y).numel())
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s.
    pub fn add_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let inner = self.bcast_check(x, y, "add_bcast")?;
        let yd = self.data(y);
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &b) in chunk.iter_mut().zip(yd) {
                *o += b;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddBcast { x, y }, rg))
    }

    /// `x ⊙ y` where `y`'s shape is a trailing suffix of `x`'s.
    pub fn mul_bcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let inner = self.bcast_check(x, y, "mul_bcast")?;
        let yd = self.data(y);
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_mut(inner) {
            for (o, &b) in chunk.iter_mut().zip(yd) {
                *o *= b;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MulBcast { x, y }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Scale { x, c }, rg))
    }

    /// Multiplies `x` by the one-element tensor `s`.
    pub fn scale_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let data = self.data(x).iter().map(|v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(Tensor::new(&shape, data)?, Op::ScaleVar { x, s }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    pub fn activation(&mut self, act: Activation, x: Var) -> Result<Var> {
        let input = self.data(x);
        check_finite(act.name(), input)?;
        let data = input
            .iter()
            .map(|&v| match act {
                Activation::Gelu => gelu_scalar(v),
                Activation::Swish => v * sigmoid_scalar(v),
                Activation::Tanh => v.tanh(),
                Activation::Sigmoid => sigmoid_scalar(v),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Unary { x, act }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Gelu, x)
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Swish, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis restricted to entries where `keep` is set.
    /// Masked entries are exactly zero; a fully masked row is all zeros.
    pub fn softmax_masked(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::shape("softmax_masked", self.shape(x), &[keep.len()]));
        }
        self.softmax_impl(x, Some(keep))
    }

    fn softmax_impl(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().ok_or(Error::EmptyAxis { op: "softmax" })?;
        if cols == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        let input = self.data(x);
        check_finite("softmax", input)?;
        let mut out = vec![0.0; input.len()];
        for (r, (row_in, row_out)) in input.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let kept = |j: usize| keep.is_none_or(|m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| kept(j))
                .map(|j| row_in[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..cols {
                if kept(j) {
                    row_out[j] = (row_in[j] - max).exp();
                    total += row_out[j];
                }
            }
            for v in row_out.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { x, cols }, rg))
    }

    /// Layer normalization over the last axis with optional affine terms.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::EmptyAxis { op: "layer_norm" })?;
        if d == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        if eps < 0.0 {
            return Err(Error::Param(format!("layer_norm eps must be >= 0, got {eps}")));
        }
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [d] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let (xhat, rstd) = normalize_groups(self.data(x), d, eps);
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gd = self.data(g);
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(gd).for_each(|(o, &gv)| *o *= gv);
            }
        }
        if let Some(b) = bias {
            let bd = self.data(b);
            for row in out.chunks_mut(d) {
                row.iter_mut().zip(bd).for_each(|(o, &bv)| *o += bv);
            }
        }
        let rg = self.rg(x) || gain.is_some_and(|g| self.rg(g)) || bias.is_some_and(|b| self.rg(b));
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            d,
            xhat,
            rstd,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    /// Normalizes each contiguous `d/groups`-wide block of every row
    /// independently; no affine terms.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::EmptyAxis { op: "group_norm" })?;
        if d == 0 || groups == 0 {
            return Err(Error::EmptyAxis { op: "group_norm" });
        }
        if d % groups != 0 {
            return Err(Error::Divisibility {
                op: "group_norm",
                extent: d,
                by: groups,
            });
        }
        let group = d / groups;
        let (xhat, rstd) = normalize_groups(self.data(x), group, eps);
        let rg = self.rg(x);
        let out = Tensor::new(&shape, xhat.clone())?;
        Ok(self.push(out, Op::GroupNorm { x, group, xhat, rstd }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptyAxis { op: "mean" });
        }
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean { x }, rg))
    }

    /// Gathers rows of a matrix; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather_rows", &shape, &[idx.len()]));
        }
        let (rows, k) = (shape[0], shape[1]);
        let src = self.data(x);
        let mut out = vec![0.0; idx.len() * k];
        for (dst, i) in out.chunks_mut(k.max(1)).zip(idx) {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(Error::Range(format!("gather index {i} out of {rows} rows")));
                }
                dst.copy_from_slice(&src[i * k..(i + 1) * k]);
            }
        }
        let rg = self.rg(x);
        let op = Op::GatherRows {
            x,
            idx: idx.to_vec(),
            k,
        };
        Ok(self.push(Tensor::new(&[idx.len(), k], out)?, op, rg))
    }

    /// Sparse-dense product `adj · x[cols, k]`.
    pub fn spmm(&mut self, adj: &Arc<CsrMatrix>, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != adj.cols {
            return Err(Error::shape("spmm", &[adj.rows, adj.cols], &shape));
        }
        let k = shape[1];
        if k == 0 {
            return Err(Error::EmptyAxis { op: "spmm" });
        }
        let out = adj.matmul_dense(self.data(x), k);
        let rg = self.rg(x);
        let op = Op::SpMM {
            adj: Arc::clone(adj),
            x,
            k,
        };
        Ok(self.push(Tensor::new(&[adj.rows, k], out)?, op, rg))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&0);
        if start + len > width {
            return Err(Error::shape("slice_last", &shape, &[start, len]));
        }
        let mut out = Vec::with_capacity(self.value(x).numel() / width.max(1) * len);
        for row in self.data(x).chunks(width) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        let op = Op::SliceLast { x, start, len, width };
        Ok(self.push(Tensor::new(&new_shape, out)?, op, rg))
    }

    pub fn concat_last(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or(Error::EmptyAxis { op: "concat_last" })?;
        let lead = self.shape(*first).split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = xs.iter().any(|&v| self.rg(v));
        let op = Op::ConcatLast {
            xs: xs.to_vec(),
            widths,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    /// `x[:, index, :]` of a rank-3 tensor.
    pub fn select_mid(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || index >= shape[1] {
            return Err(Error::shape("select_mid", &shape, &[index]));
        }
        let (outer, mid, inner) = (shape[0], shape[1], shape[2]);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * mid + index) * inner;
            out.extend_from_slice(&src[base..base + inner]);
        }
        let rg = self.rg(x);
        let op = Op::SelectMid { x, index, mid, inner };
        Ok(self.push(Tensor::new(&[outer, inner], out)?, op, rg))
    }

    /// Stacks `[outer, inner]` matrices along a new middle axis.
    pub fn stack_mid(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::EmptyAxis { op: "stack_mid" })?;
        let shape = self.shape(first).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("stack_mid", &shape, &[]));
        }
        if let Some(bad) = xs.iter().find(|&&v| self.shape(v) != shape.as_slice()) {
            return Err(Error::shape("stack_mid", &shape, self.shape(*bad)));
        }
        let (outer, inner) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(outer * xs.len() * inner);
        for o in 0..outer {
            for &v in xs {
                out.extend_from_slice(&self.data(v)[o * inner..(o + 1) * inner]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        let op = Op::StackMid {
            xs: xs.to_vec(),
            inner,
        };
        Ok(self.push(Tensor::new(&[outer, xs.len(), inner], out)?, op, rg))
    }

    /// Rotates feature pairs of `x[.., positions, width]` by per-position
    /// angles.
    pub fn rotate(&mut self, x: Var, table: &Arc<RotationTable>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || shape[shape.len() - 2] != table.positions {
            return Err(Error::shape("rotate", &shape, &[table.positions, table.pairs * 2]));
        }
        let width = shape[shape.len() - 1];
        if 2 * table.pairs > width {
            return Err(Error::shape("rotate", &shape, &[table.positions, table.pairs * 2]));
        }
        let mut out = self.data(x).to_vec();
        table.apply(&mut out, width, 1.0);
        let rg = self.rg(x);
        let op = Op::Rotate {
            x,
            table: Arc::clone(table),
            width,
        };
        Ok(self.push(Tensor::new(&shape, out)?, op, rg))
    }

    /// Lower-triangular kernel `K[s1,s2] = γ^(s1−s2)` for `s1 ≥ s2`, built
    /// from a one-element `gamma` so the decay itself is differentiable.
    pub fn decay_kernel(&mut self, gamma: Var, size: usize) -> Result<Var> {
        let g = self.value(gamma).item()?;
        let mut out = vec![0.0; size * size];
        for s1 in 0..size {
            for s2 in 0..=s1 {
                out[s1 * size + s2] = g.powi((s1 - s2) as i32);
            }
        }
        let rg = self.rg(gamma);
        Ok(self.push(Tensor::new(&[size, size], out)?, Op::DecayKernel { gamma, size }, rg))
    }

    /// Mean softmax cross-entropy of `logits[B, K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.is_empty() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let k = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Validation(format!("label {bad} >= class count {k}")));
        }
        let input = self.data(logits);
        check_finite("cross_entropy", input)?;
        let mut probs = input.to_vec();
        let mut total = 0.0;
        for (row, (probs_row, &t)) in input.chunks(k).zip(probs.chunks_mut(k).zip(targets)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            for (p, &v) in probs_row.iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let loss = total / targets.len() as f64;
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Mean per-entry sigmoid cross-entropy against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let n = self.value(logits).numel();
        if n != targets.len() || n == 0 {
            return Err(Error::shape("bce_with_logits", self.shape(logits), &[targets.len()]));
        }
        let input = self.data(logits);
        check_finite("bce_with_logits", input)?;
        // max(x,0) - x*y + ln(1 + e^{-|x|})
        let total: f64 = input
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        let op = Op::BceLogits {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(total / n as f64), op, rg))
    }

    /// `x · w (+ b)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bcast(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a one-element `loss`. The tape is left intact.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Rank {
                op: "backward",
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(buf);
        };
        let add_into = |buf: &mut [f64], src: &[f64]| buf.iter_mut().zip(src).for_each(|(b, s)| *b += s);

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                acc(a, &mut |buf| add_into(buf, &matmul_nt_raw(g, self.data(b), m, n, k)));
                acc(b, &mut |buf| add_into(buf, &matmul_tn_raw(self.data(a), g, m, k, n)));
            }
            &Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (da, db) = (self.data(a), self.data(b));
                acc(a, &mut |buf| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &db[i * k * n..(i + 1) * k * n];
                        let part = if trans_b {
                            matmul_raw(gi, bi, m, n, k)
                        } else {
                            matmul_nt_raw(gi, bi, m, n, k)
                        };
                        add_into(&mut buf[i * m * k..(i + 1) * m * k], &part);
                    }
                });
                acc(b, &mut |buf| {
                    for i in 0..batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &da[i * m * k..(i + 1) * m * k];
                        let part = if trans_b {
                            matmul_tn_raw(gi, ai, m, n, k)
                        } else {
                            matmul_tn_raw(ai, gi, m, k, n)
                        };
                        add_into(&mut buf[i * k * n..(i + 1) * k * n], &part);
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |buf| add_into(buf, g));
                acc(b, &mut |buf| add_into(buf, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |buf| add_into(buf, g));
                acc(b, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                acc(a, &mut |buf| {
                    for ((o, gv), bv) in buf.iter_mut().zip(g).zip(db) {
                        *o += gv * bv;
                    }
                });
                acc(b, &mut |buf| {
                    for ((o, gv), av) in buf.iter_mut().zip(g).zip(da) {
                        *o += gv * av;
                    }
                });
            }
            &Op::AddBcast { x, y } => {
                let inner = self.value(y).numel();
                acc(x, &mut |buf| add_into(buf, g));
                acc(y, &mut |buf| {
                    for chunk in g.chunks(inner) {
                        add_into(buf, chunk);
                    }
                });
            }
            &Op::MulBcast { x, y } => {
                let inner = self.value(y).numel();
                let (dx, dy) = (self.data(x), self.data(y));
                acc(x, &mut |buf| {
                    for (bc, gc) in buf.chunks_mut(inner).zip(g.chunks(inner)) {
                        for ((o, gv), yv) in bc.iter_mut().zip(gc).zip(dy) {
                            *o += gv * yv;
                        }
                    }
                });
                acc(y, &mut |buf| {
                    for (gc, xc) in g.chunks(inner).zip(dx.chunks(inner)) {
                        for ((o, gv), xv) in buf.iter_mut().zip(gc).zip(xc) {
                            *o += gv * xv;
                        }
                    }
                });
            }
            &Op::Scale { x, c } => acc(x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += c * v)),
            &Op::ScaleVar { x, s } => {
                let sv = self.data(s)[0];
                let dx = self.data(x);
                acc(x, &mut |buf| buf.iter_mut().zip(g).for_each(|(o, v)| *o += sv * v));
                acc(s, &mut |buf| buf[0] += g.iter().zip(dx).map(|(a, b)| a * b).sum::<f64>());
            }
            &Op::Reshape { x } => acc(x, &mut |buf| add_into(buf, g)),
            &Op::Unary { x, act } => {
                let (dx, out) = (self.data(x), node.value.data());
                acc(x, &mut |buf| {
                    for i in 0..buf.len() {
                        let d = match act {
                            Activation::Gelu => gelu_grad_scalar(dx[i]),
                            Activation::Swish => {
                                let s = sigmoid_scalar(dx[i]);
                                s + dx[i] * s * (1.0 - s)
                            }
                            Activation::Tanh => 1.0 - out[i] * out[i],
                            Activation::Sigmoid => out[i] * (1.0 - out[i]),
                        };
                        buf[i] += g[i] * d;
                    }
                });
            }
            &Op::Softmax { x, cols } => {
                let y = node.value.data();
                acc(x, &mut |buf| {
                    for ((bc, gc), yc) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                        let s: f64 = gc.iter().zip(yc).map(|(a, b)| a * b).sum();
                        for ((o, gv), yv) in bc.iter_mut().zip(gc).zip(yc) {
                            *o += yv * (gv - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                xhat,
                rstd,
            } => {
                let d = *d;
                let gain_data = gain.map(|v| self.data(v));
                acc(*x, &mut |buf| {
                    let mut gh = vec![0.0; d];
                    for (r, (bc, gc)) in buf.chunks_mut(d).zip(g.chunks(d)).enumerate() {
                        for j in 0..d {
                            gh[j] = gc[j] * gain_data.map_or(1.0, |gd| gd[j]);
                        }
                        norm_backward_row(bc, &gh, &xhat[r * d..(r + 1) * d], rstd[r]);
                    }
                });
                if let Some(gv) = *gain {
                    acc(gv, &mut |buf| {
                        for (gc, xc) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, a), b) in buf.iter_mut().zip(gc).zip(xc) {
                                *o += a * b;
                            }
                        }
                    });
                }
                if let Some(bv) = *bias {
                    acc(bv, &mut |buf| {
                        for gc in g.chunks(d) {
                            add_into(buf, gc);
                        }
                    });
                }
            }
            Op::GroupNorm { x, group, xhat, rstd } => {
                let group = *group;
                acc(*x, &mut |buf| {
                    for (r, (bc, gc)) in buf.chunks_mut(group).zip(g.chunks(group)).enumerate() {
                        norm_backward_row(bc, gc, &xhat[r * group..(r + 1) * group], rstd[r]);
                    }
                });
            }
            &Op::Sum { x } => acc(x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0])),
            &Op::Mean { x } => {
                let n = self.value(x).numel() as f64;
                acc(x, &mut |buf| buf.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::GatherRows { x, idx, k } => {
                let k = *k;
                acc(*x, &mut |buf| {
                    for (gc, i) in g.chunks(k.max(1)).zip(idx) {
                        if let Some(i) = *i {
                            add_into(&mut buf[i * k..(i + 1) * k], gc);
                        }
                    }
                });
            }
            Op::SpMM { adj, x, k } => {
                acc(*x, &mut |buf| add_into(buf, &adj.transpose_matmul_dense(g, *k)));
            }
            &Op::SliceLast { x, start, len, width } => {
                acc(x, &mut |buf| {
                    for (bc, gc) in buf.chunks_mut(width).zip(g.chunks(len)) {
                        add_into(&mut bc[start..start + len], gc);
                    }
                });
            }
            Op::ConcatLast { xs, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&v, &w) in xs.iter().zip(widths) {
                    acc(v, &mut |buf| {
                        for (bc, gc) in buf.chunks_mut(w).zip(g.chunks(total)) {
                            add_into(bc, &gc[offset..offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            &Op::SelectMid { x, index, mid, inner } => {
                acc(x, &mut |buf| {
                    for (o, gc) in g.chunks(inner).enumerate() {
                        let base = (o * mid + index) * inner;
                        add_into(&mut buf[base..base + inner], gc);
                    }
                });
            }
            Op::StackMid { xs, inner } => {
                let inner = *inner;
                let n = xs.len();
                for (s, &v) in xs.iter().enumerate() {
                    acc(v, &mut |buf| {
                        for (o, bc) in buf.chunks_mut(inner).enumerate() {
                            let base = (o * n + s) * inner;
                            add_into(bc, &g[base..base + inner]);
                        }
                    });
                }
            }
            Op::Rotate { x, table, width } => {
                acc(*x, &mut |buf| {
                    let mut back = g.to_vec();
                    table.apply(&mut back, *width, -1.0);
                    add_into(buf, &back);
                });
            }
            &Op::DecayKernel { gamma, size } => {
                let gv = self.data(gamma)[0];
                acc(gamma, &mut |buf| {
                    let mut total = 0.0;
                    for s1 in 0..size {
                        for s2 in 0..s1 {
                            let p = (s1 - s2) as i32;
                            total += g[s1 * size + s2] * p as f64 * gv.powi(p - 1);
                        }
                    }
                    buf[0] += total;
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = probs.len() / targets.len();
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let y = if j == t { 1.0 } else { 0.0 };
                            buf[r * k + j] += scale * (probs[r * k + j] - y);
                        }
                    }
                });
            }
            Op::BceLogits { logits, targets } => {
                let x = self.data(*logits);
                let scale = g[0] / targets.len() as f64;
                acc(*logits, &mut |buf| {
                    for ((o, &xv), &y) in buf.iter_mut().zip(x).zip(targets) {
                        *o += scale * (sigmoid_scalar(xv) - y);
                    }
                });
            }
        }
    }
}

/// Zero-mean/unit-variance normalization of every `width`-wide chunk.
/// Returns the normalized values and one reciprocal std per chunk.
fn normalize_groups(data: &[f64], width: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = Vec::with_capacity(data.len());
    let mut rstd = Vec::with_capacity(data.len() / width);
    for chunk in data.chunks(width) {
        let mean = chunk.iter().sum::<f64>() / width as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
        let r = 1.0 / (var + eps).sqrt();
        xhat.extend(chunk.iter().map(|v| (v - mean) * r));
        rstd.push(r);
    }
    (xhat, rstd)
}

fn norm_backward_row(out: &mut [f64], g: &[f64], xhat: &[f64], rstd: f64) {
    let w = g.len() as f64;
    let mean_g = g.iter().sum::<f64>() / w;
    let mean_gx = g.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / w;
    for ((o, gv), xv) in out.iter_mut().zip(g).zip(xhat) {
        *o += rstd * (gv - mean_g - xv * mean_gx);
    }
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per parameter tensor, in input order.
    pub per_param: Vec<f64>,
}

/// Compares tape gradients against central finite differences.
///
/// `f` records a scalar loss on a fresh tape given one [`Var`] per entry of
/// `params`. The relative error of an entry is
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Param(format!("grad_check eps {eps} outside [1e-6, 1e-3]")));
    }
    fn eval<F>(f: &mut F, values: &[Tensor]) -> Result<f64>
    where
        F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    }

    let first = eval(&mut f, params)?;
    let second = eval(&mut f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(&v, p)| grads.get(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
            .collect()
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..grad.len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + eps;
            let plus = eval(&mut f, &work)?;
            work[pi].data_mut()[j] = orig - eps;
            let minus = eval(&mut f, &work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let denom = 1.0f64.max(grad[j].abs()).max(numeric.abs());
            worst = worst.max((grad[j] - numeric).abs() / denom);
        }
        per_param.push(worst);
    }
    let max_rel_error = per_param.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
    })
}
