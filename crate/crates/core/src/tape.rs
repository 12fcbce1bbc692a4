//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value; node inputs always
//! precede the node, so a single reverse sweep is a valid topological
//! order. Gradients accumulate additively when a value feeds several ops.
//! A tape supports exactly one backward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{dot, gemm, gemm_a_bt, gemm_at_b, matmul_dims, Tensor};

/// Layer-norm epsilon, added to the variance inside the square root.
pub const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    GatherEntries {
        x: Var,
        idx: Vec<(usize, usize)>,
    },
    PoolAvg {
        x: Var,
        r: usize,
    },
    PoolStack(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Recorded computation. See the module docs.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn expect_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::shape(
            op,
            format!("expected a matrix, got {:?}", t.shape()),
        ));
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v`
    /// participates in gradient flow.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k, n) = matmul_dims(va, vb)?;
        let mut out = vec![0.0; m * n];
        gemm(va.data(), vb.data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, rg, Op::Transpose(a)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += x;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Adds vector `b` (length = last dim of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(b).len() != n {
            return Err(Error::shape(
                "add_row",
                format!(
                    "{:?} cannot broadcast {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(b).data();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &x) in row.iter_mut().zip(bias) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::AddRow(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= x;
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// Scales row `i` of matrix `a` by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (m, n) = expect_matrix("mul_col", self.value(a))?;
        if self.value(c).len() != m {
            return Err(Error::shape(
                "mul_col",
                format!(
                    "{:?} rows vs {:?} scales",
                    self.value(a).shape(),
                    self.value(c).shape()
                ),
            ));
        }
        let mut out = self.value(a).clone();
        let scales = self.value(c).data();
        for (row, &s) in out.data_mut().chunks_mut(n.max(1)).zip(scales) {
            for o in row {
                *o *= s;
            }
        }
        let rg = self.rg(&[a, c]);
        Ok(self.push(out, rg, Op::MulCol(a, c)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o *= k;
        }
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Scale(a, k))
    }

    /// Elementwise GELU (tanh approximation, see [`math::gelu`]).
    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = math::gelu(*o);
        }
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        let rg = self.rg(&[a]);
        self.push(out, rg, Op::Relu(a))
    }

    /// Softmax along `axis`, stabilized by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} invalid for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..n {
                    mx = mx.max(d[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..n {
                    let e = math::exp(d[at(j)] - mx);
                    d[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    d[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, rg, Op::Softmax { x, outer, n, inner }))
    }

    /// Row softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).shape().len().saturating_sub(1);
        self.softmax(x, axis)
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layernorm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.value(x).shape(),
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let rows = self.value(x).len() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = self.value(x).clone();
        {
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            let src = self.value(x).data();
            let od = out.data_mut();
            for r in 0..rows {
                let row = &src[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / math::sqrt(var + LN_EPS);
                inv_std[r] = is;
                for j in 0..d {
                    let xh = (row[j] - mean) * is;
                    xhat[r * d + j] = xh;
                    od[r * d + j] = xh * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Mean token negative log-likelihood of `targets` under row-softmax
    /// of `logits[S×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (s, v) = expect_matrix("cross_entropy", self.value(logits))?;
        if s != targets.len() || s == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{s} logit rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::index(
                "cross_entropy",
                format!("target {bad} out of range for vocabulary {v}"),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; s * v];
        let mut total = 0.0;
        for r in 0..s {
            let row = &src[r * v..(r + 1) * v];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = math::exp(row[j] - mx);
                probs[r * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[r * v + j] /= sum;
            }
            total += -(row[targets[r]] - mx - math::ln(sum));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / s as f64),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Column means of a matrix, as a vector.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = expect_matrix("mean_rows", self.value(a))?;
        if m == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::vector(out), rg, Op::MeanRows(a)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = expect_matrix("slice_rows", self.value(x))?;
        if start > end || end > m {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of {m}"),
            ));
        }
        let data = self.value(x).data()[start * n..end * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(end - start, n, data)?,
            rg,
            Op::SliceRows { x, start },
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = match parts.first() {
            Some(&p) => expect_matrix("concat_rows", self.value(p))?.1,
            None => return Err(Error::shape("concat_rows", "no inputs")),
        };
        let mut data = Vec::new();
        for &p in parts {
            let (_, c) = expect_matrix("concat_rows", self.value(p))?;
            if c != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("width {c} vs {n}"),
                ));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / n.max(1);
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(rows, n, data)?,
            rg,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = expect_matrix("slice_cols", self.value(x))?;
        if start > end || end > n {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}..{end} of {n}"),
            ));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for row in self.value(x).data().chunks(n) {
            data.extend_from_slice(&row[start..end]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(m, end - start, data)?,
            rg,
            Op::SliceCols { x, start },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => expect_matrix("concat_cols", self.value(p))?.0,
            None => return Err(Error::shape("concat_cols", "no inputs")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = expect_matrix("concat_cols", self.value(p))?;
            if r != m {
                return Err(Error::shape("concat_cols", format!("rows {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::matrix(m, total, data)?,
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Selects rows of a matrix by index (embedding lookup, token routing).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = expect_matrix("gather_rows", self.value(x))?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::index("gather_rows", format!("row {i} of {m}")));
            }
            data.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(idx.len(), n, data)?,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Builds an `rows × n` matrix of zeros and adds row `i` of `x` into
    /// row `idx[i]`.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = expect_matrix("scatter_rows", self.value(x))?;
        if m != idx.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{m} rows vs {} indices", idx.len()),
            ));
        }
        let mut out = vec![0.0; rows * n];
        for (i, &dst) in idx.iter().enumerate() {
            if dst >= rows {
                return Err(Error::index("scatter_rows", format!("row {dst} of {rows}")));
            }
            for (o, &v) in out[dst * n..(dst + 1) * n]
                .iter_mut()
                .zip(self.value(x).row(i))
            {
                *o += v;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(rows, n, out)?,
            rg,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Picks entries `(row, col)` of a matrix into an `m × 1` column.
    pub fn gather_entries(&mut self, x: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = expect_matrix("gather_entries", self.value(x))?;
        let mut data = Vec::with_capacity(idx.len());
        for &(r, c) in idx {
            if r >= m || c >= n {
                return Err(Error::index(
                    "gather_entries",
                    format!("({r}, {c}) of {m}x{n}"),
                ));
            }
            data.push(self.value(x).get2(r, c));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(idx.len(), 1, data)?,
            rg,
            Op::GatherEntries {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Averages non-overlapping windows of `r` rows; a short final window
    /// is averaged over the rows it has.
    pub fn pool_avg(&mut self, x: Var, r: usize) -> Result<Var> {
        let (m, n) = expect_matrix("pool_avg", self.value(x))?;
        if r == 0 {
            return Err(Error::contract("pooling rate must be at least 1"));
        }
        let out_rows = m.div_ceil(r);
        let mut out = vec![0.0; out_rows * n];
        let src = self.value(x).data();
        for w in 0..out_rows {
            let lo = w * r;
            let hi = (lo + r).min(m);
            let orow = &mut out[w * n..(w + 1) * n];
            for i in lo..hi {
                for (o, &v) in orow.iter_mut().zip(&src[i * n..(i + 1) * n]) {
                    *o += v;
                }
            }
            let cnt = (hi - lo) as f64;
            for o in orow {
                *o /= cnt;
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(out_rows, n, out)?,
            rg,
            Op::PoolAvg { x, r },
        ))
    }

    /// Concatenates groups of `r` consecutive rows feature-wise; a short
    /// final group is zero padded to `r · n` columns.
    pub fn pool_stack(&mut self, x: Var, r: usize) -> Result<Var> {
        let (m, n) = expect_matrix("pool_stack", self.value(x))?;
        if r == 0 {
            return Err(Error::contract("stacking rate must be at least 1"));
        }
        let out_rows = m.div_ceil(r);
        let mut out = vec![0.0; out_rows * r * n];
        out[..m * n].copy_from_slice(self.value(x).data());
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::matrix(out_rows, r * n, out)?,
            rg,
            Op::PoolStack(x),
        ))
    }

    /// Multi-head causal self-attention on already projected `q`, `k`, `v`
    /// (`T × d` each, `d` divisible by `heads`), with scores scaled by
    /// `1/sqrt(d/heads)`. Position `i` attends to positions `0..=i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (t, d) = expect_matrix("causal_attention", self.value(q))?;
        for other in [k, v] {
            if self.value(other).shape() != [t, d] {
                return Err(Error::shape(
                    "causal_attention",
                    format!("q {:?} vs {:?}", [t, d], self.value(other).shape()),
                ));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("width {d} not divisible into {heads} heads"),
            ));
        }
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let c0 = h * dh;
            let (kt, vt) = (head_major(kd, t, d, c0, dh), head_major(vd, t, d, c0, dh));
            for i in 0..t {
                let prow = &mut probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                for c in 0..dh {
                    axpy(prow, qd[i * d + c0 + c] * scale, &kt[c * t..c * t + i + 1]);
                }
                let mx = prow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for p in prow.iter_mut() {
                    *p = math::exp(*p - mx);
                    sum += *p;
                }
                let inv = 1.0 / sum;
                for p in prow.iter_mut() {
                    *p *= inv;
                }
                for c in 0..dh {
                    out[i * d + c0 + c] = dot(prow, &vt[c * t..c * t + i + 1]);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::matrix(t, d, out)?,
            rg,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Back-propagates from a single-element `loss`, populating gradients
    /// of every reachable value that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; record a new forward pass",
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            let shape = self.nodes[i].value.shape().to_vec();
            self.nodes[i].grad = Some(Tensor::new(shape, g)?);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes, $v)
            };
        }
        let out = &nodes[i].value;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = matmul_dims(val(*a), val(*b))?;
                if needs(*a) {
                    let bv = val(*b).data();
                    gemm_a_bt(g, bv, acc!(*a), m, k, n);
                }
                if needs(*b) {
                    let av = val(*a).data();
                    gemm_at_b(av, g, acc!(*b), m, k, n);
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let ga = acc!(*a);
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        for (o, &x) in acc!(v).iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                if needs(*a) {
                    for (o, &x) in acc!(*a).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if needs(*b) {
                    let n = val(*b).len();
                    let gb = acc!(*b);
                    for row in g.chunks(n) {
                        for (o, &x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = val(*b).data();
                    for ((o, &x), &y) in acc!(*a).iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if needs(*b) {
                    let av = val(*a).data();
                    for ((o, &x), &y) in acc!(*b).iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::MulCol(a, c) => {
                let n = val(*a).cols().max(1);
                if needs(*a) {
                    let cv = val(*c).data();
                    let ga = acc!(*a);
                    for ((orow, grow), &s) in ga.chunks_mut(n).zip(g.chunks(n)).zip(cv) {
                        for (o, &x) in orow.iter_mut().zip(grow) {
                            *o += x * s;
                        }
                    }
                }
                if needs(*c) {
                    let av = val(*a).data();
                    let gc = acc!(*c);
                    for ((o, grow), arow) in gc.iter_mut().zip(g.chunks(n)).zip(av.chunks(n)) {
                        *o += dot(grow, arow);
                    }
                }
            }
            Op::Scale(a, k) => {
                if needs(*a) {
                    for (o, &x) in acc!(*a).iter_mut().zip(g) {
                        *o += x * k;
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let av = val(*a).data();
                    for ((o, &x), &z) in acc!(*a).iter_mut().zip(g).zip(av) {
                        *o += x * math::gelu_grad(z);
                    }
                }
            }
            Op::Relu(a) => {
                if needs(*a) {
                    let av = val(*a).data();
                    for ((o, &x), &z) in acc!(*a).iter_mut().zip(g).zip(av) {
                        if z > 0.0 {
                            *o += x;
                        }
                    }
                }
            }
            Op::Softmax { x, outer, n, inner } => {
                if needs(*x) {
                    let y = out.data();
                    let gx = acc!(*x);
                    for o in 0..*outer {
                        for ii in 0..*inner {
                            let at = |j: usize| (o * n + j) * inner + ii;
                            let mut s = 0.0;
                            for j in 0..*n {
                                s += g[at(j)] * y[at(j)];
                            }
                            for j in 0..*n {
                                gx[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).len();
                if needs(*gain) {
                    let gg = acc!(*gain);
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, &a), &b) in gg.iter_mut().zip(grow).zip(xrow) {
                            *o += a * b;
                        }
                    }
                }
                if needs(*bias) {
                    let gb = acc!(*bias);
                    for grow in g.chunks(d) {
                        for (o, &a) in gb.iter_mut().zip(grow) {
                            *o += a;
                        }
                    }
                }
                if needs(*x) {
                    let gain_v = val(*gain).data();
                    let gx = acc!(*x);
                    let df = d as f64;
                    for (r, &is) in inv_std.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xhat[r * d..(r + 1) * d];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * gain_v[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xrow[j];
                        }
                        for j in 0..d {
                            let dxh = grow[j] * gain_v[j];
                            gx[r * d + j] +=
                                is / df * (df * dxh - sum_dxh - xrow[j] * sum_dxh_xh);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if needs(*logits) {
                    let v = val(*logits).cols();
                    let s = targets.len() as f64;
                    let scale = g[0] / s;
                    let gl = acc!(*logits);
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    for o in acc!(*a).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if needs(*a) {
                    let n = val(*a).len().max(1) as f64;
                    for o in acc!(*a).iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::MeanRows(a) => {
                if needs(*a) {
                    let (m, n) = (val(*a).shape()[0], val(*a).shape()[1]);
                    let ga = acc!(*a);
                    for row in ga.chunks_mut(n) {
                        for (o, &x) in row.iter_mut().zip(g) {
                            *o += x / m as f64;
                        }
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let n = val(*x).cols();
                    let gx = acc!(*x);
                    for (o, &v) in gx[start * n..start * n + g.len()].iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if needs(p) {
                        for (o, &v) in acc!(p).iter_mut().zip(&g[off..off + len]) {
                            *o += v;
                        }
                    }
                    off += len;
                }
            }
            Op::SliceCols { x, start } => {
                if needs(*x) {
                    let n = val(*x).cols();
                    let w = out.cols();
                    let gx = acc!(*x);
                    for (r, grow) in g.chunks(w.max(1)).enumerate() {
                        for (o, &v) in gx[r * n + start..r * n + start + w].iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let gp = acc!(p);
                        for (r, prow) in gp.chunks_mut(w.max(1)).enumerate() {
                            for (o, &v) in prow.iter_mut().zip(&g[r * total + off..r * total + off + w])
                            {
                                *o += v;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::GatherRows { x, idx } => {
                if needs(*x) {
                    let n = val(*x).cols();
                    let gx = acc!(*x);
                    for (i, &src) in idx.iter().enumerate() {
                        for (o, &v) in gx[src * n..(src + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ScatterRows { x, idx } => {
                if needs(*x) {
                    let n = val(*x).cols();
                    let gx = acc!(*x);
                    for (i, &dst) in idx.iter().enumerate() {
                        for (o, &v) in gx[i * n..(i + 1) * n].iter_mut().zip(&g[dst * n..(dst + 1) * n]) {
                            *o += v;
                        }
                    }
                }
            }
            Op::GatherEntries { x, idx } => {
                if needs(*x) {
                    let n = val(*x).cols();
                    let gx = acc!(*x);
                    for (&(r, c), &v) in idx.iter().zip(g) {
                        gx[r * n + c] += v;
                    }
                }
            }
            Op::PoolAvg { x, r } => {
                if needs(*x) {
                    let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                    let gx = acc!(*x);
                    for (w, grow) in g.chunks(n.max(1)).enumerate() {
                        let lo = w * r;
                        let hi = (lo + r).min(m);
                        let cnt = (hi - lo) as f64;
                        for i in lo..hi {
                            for (o, &v) in gx[i * n..(i + 1) * n].iter_mut().zip(grow) {
                                *o += v / cnt;
                            }
                        }
                    }
                }
            }
            Op::PoolStack(x) => {
                if needs(*x) {
                    let len = val(*x).len();
                    for (o, &v) in acc!(*x).iter_mut().zip(&g[..len]) {
                        *o += v;
                    }
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (t, d) = (out.shape()[0], out.shape()[1]);
                let dh = d / heads;
                let scale = 1.0 / math::sqrt(dh as f64);
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut gq = vec![0.0; t * d];
                let mut gk = vec![0.0; t * d];
                let mut gv = vec![0.0; t * d];
                let mut dp = vec![0.0; t];
                for h in 0..*heads {
                    let c0 = h * dh;
                    let (kt, vt) = (head_major(kd, t, d, c0, dh), head_major(vd, t, d, c0, dh));
                    let mut gkt = vec![0.0; dh * t];
                    let mut gvt = vec![0.0; dh * t];
                    for i in 0..t {
                        let prow = &probs[(h * t + i) * t..(h * t + i) * t + i + 1];
                        let dp = &mut dp[..=i];
                        dp.fill(0.0);
                        for c in 0..dh {
                            let go = g[i * d + c0 + c];
                            axpy(dp, go, &vt[c * t..c * t + i + 1]);
                            axpy(&mut gvt[c * t..c * t + i + 1], go, prow);
                        }
                        let s = dot(prow, dp);
                        for (x, &p) in dp.iter_mut().zip(prow) {
                            *x = p * (*x - s) * scale;
                        }
                        for c in 0..dh {
                            gq[i * d + c0 + c] += dot(dp, &kt[c * t..c * t + i + 1]);
                            axpy(&mut gkt[c * t..c * t + i + 1], qd[i * d + c0 + c], dp);
                        }
                    }
                    for c in 0..dh {
                        for j in 0..t {
                            gk[j * d + c0 + c] = gkt[c * t + j];
                            gv[j * d + c0 + c] = gvt[c * t + j];
                        }
                    }
                }
                for (var, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if needs(var) {
                        for (o, x) in acc!(var).iter_mut().zip(local) {
                            *o += x;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Columns `c0..c0 + dh` of a row-major `t × d` matrix, transposed to
/// `dh × t`.
fn head_major(x: &[f64], t: usize, d: usize, c0: usize, dh: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * t];
    for j in 0..t {
        for c in 0..dh {
            out[c * t + j] = x[j * d + c0 + c];
        }
    }
    out
}

#[inline(always)]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += a * v;
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'g mut [f64] {
    let len = nodes[v.0].value.len();
    grads[v.0]
        .get_or_insert_with(|| vec![0.0; len])
        .as_mut_slice()
}
