use super::Tensor;
use crate::error::{Error, Result};

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-10;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Affine(Var, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sigmoid(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherPerRow(Var, Vec<Vec<usize>>),
    ScatterPerRow(Var, Vec<Vec<usize>>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Append-only tape of primitive applications.
///
/// Nodes are stored in creation order, which is a topological order by
/// construction: an op can only reference vars that already exist.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter() {
        sum += (*v - max).exp();
    }
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, ng: bool) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op, ng))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf that does not participate in differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is wanted.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = require_2d("matmul", self.value(a))?;
        let (k2, n) = require_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        let ng = self.ng(&[a, b]);
        self.push_checked("matmul", t, Op::MatMul(a, b), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = require_2d("transpose", self.value(a))?;
        let t = Tensor::matrix(c, r, transpose_raw(self.value(a).data(), r, c))?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push_checked("add", t, Op::Add(a, b), ng)
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let cols = tx.cols();
        if tr.numel() != cols {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row of {:?}", tx.shape(), tr.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(cols) {
            for (v, b) in chunk.iter_mut().zip(tr.data()) {
                *v += b;
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x, row]);
        self.push_checked("add_row", t, Op::AddRow(x, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape("mul", format!("{:?} * {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(&[a, b]);
        self.push_checked("mul", t, Op::Mul(a, b), ng)
    }

    /// Scales row `i` of `x` by `col[i]`; `col` has one element per row.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(col));
        let (rows, cols) = require_2d("mul_col", tx)?;
        if tc.numel() != rows {
            return Err(Error::shape(
                "mul_col",
                format!("{:?} scaled by {:?}", tx.shape(), tc.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for (i, chunk) in data.chunks_mut(cols).enumerate() {
            let s = tc.data()[i];
            chunk.iter_mut().for_each(|v| *v *= s);
        }
        let t = Tensor::matrix(rows, cols, data)?;
        let ng = self.ng(&[x, col]);
        self.push_checked("mul_col", t, Op::MulCol(x, col), ng)
    }

    /// Multiplies every element of `x` by the one-element var `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * sv).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x, s]);
        self.push_checked("scale_by", t, Op::ScaleBy(x, s), ng)
    }

    /// `a * x + b` elementwise with constant `a`, `b`.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| a * v + b).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push_checked("affine", t, Op::Affine(x, a), ng)
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Result<Var> {
        self.affine(x, a, 0.0)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        data.chunks_mut(cols).for_each(softmax_in_place);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push_checked("softmax_rows", t, Op::SoftmaxRows(x), ng)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        let mut data = tx.data().to_vec();
        data.chunks_mut(cols).for_each(log_softmax_in_place);
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push_checked("log_softmax_rows", t, Op::LogSoftmaxRows(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            })
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push_checked("sigmoid", t, Op::Sigmoid(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        self.push_checked("gelu", t, Op::Gelu(x), ng)
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// elementwise affine map with `gain` and `bias` (both of length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let cols = tx.cols();
        if self.value(gain).numel() != cols || self.value(bias).numel() != cols {
            return Err(Error::shape("layer_norm", format!("affine size != {cols}")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = tx.numel() / cols;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gain, bias]);
        self.push_checked(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row lookup: output row `i` is row `idx[i]` of `table`. Embedding lookup
    /// is this op applied to an embedding table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = require_2d("gather_rows", tt)?;
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index list"));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    size: rows,
                });
            }
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(idx.len(), cols, data)?;
        let ng = self.ng(&[table]);
        Ok(self.push(t, Op::GatherRows(table, idx.to_vec()), ng))
    }

    /// Inverse of [`Graph::gather_rows`]: row `i` of `src` is added into row
    /// `idx[i]` of a zero matrix with `rows` rows.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let ts = self.value(src);
        let (n, cols) = require_2d("scatter_rows", ts)?;
        if idx.len() != n {
            return Err(Error::shape("scatter_rows", format!("{n} rows, {} indices", idx.len())));
        }
        let mut data = vec![0.0; rows * cols];
        for (k, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "scatter_rows",
                    index: i,
                    size: rows,
                });
            }
            for (o, v) in data[i * cols..(i + 1) * cols].iter_mut().zip(ts.row(k)) {
                *o += v;
            }
        }
        let t = Tensor::matrix(rows, cols, data)?;
        let ng = self.ng(&[src]);
        Ok(self.push(t, Op::ScatterRows(src, idx.to_vec()), ng))
    }

    /// Picks, for every row `r`, the columns `idx[r]` (same count per row).
    pub fn gather_per_row(&mut self, x: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = require_2d("gather_per_row", tx)?;
        let k = idx.first().map_or(0, Vec::len);
        if idx.len() != rows || k == 0 || idx.iter().any(|r| r.len() != k) {
            return Err(Error::shape("gather_per_row", "ragged or mismatched index lists"));
        }
        let mut data = Vec::with_capacity(rows * k);
        for (r, cols_r) in idx.iter().enumerate() {
            for &c in cols_r {
                if c >= cols {
                    return Err(Error::IndexOutOfRange {
                        what: "gather_per_row",
                        index: c,
                        size: cols,
                    });
                }
                data.push(tx.get(r, c));
            }
        }
        let t = Tensor::matrix(rows, k, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::GatherPerRow(x, idx.to_vec()), ng))
    }

    /// Inverse of [`Graph::gather_per_row`]: places `src[r][j]` at column
    /// `idx[r][j]` of a zero matrix with `cols` columns.
    pub fn scatter_per_row(&mut self, src: Var, idx: &[Vec<usize>], cols: usize) -> Result<Var> {
        let ts = self.value(src);
        let (rows, k) = require_2d("scatter_per_row", ts)?;
        if idx.len() != rows || idx.iter().any(|r| r.len() != k) {
            return Err(Error::shape("scatter_per_row", "index lists do not match source"));
        }
        let mut data = vec![0.0; rows * cols];
        for (r, cols_r) in idx.iter().enumerate() {
            for (j, &c) in cols_r.iter().enumerate() {
                if c >= cols {
                    return Err(Error::IndexOutOfRange {
                        what: "scatter_per_row",
                        index: c,
                        size: cols,
                    });
                }
                data[r * cols + c] += ts.get(r, j);
            }
        }
        let t = Tensor::matrix(rows, cols, data)?;
        let ng = self.ng(&[src]);
        Ok(self.push(t, Op::ScatterPerRow(src, idx.to_vec()), ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let rows = tx.shape()[0];
        if start >= end || end > rows {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {rows}")));
        }
        let inner: usize = tx.shape()[1..].iter().product();
        let data = tx.data()[start * inner..end * inner].to_vec();
        let mut shape = tx.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SliceRows(x, start), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = require_2d("slice_cols", tx)?;
        if start >= end || end > cols {
            return Err(Error::shape("slice_cols", format!("{start}..{end} of {cols}")));
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..end]);
        }
        let t = Tensor::matrix(rows, end - start, data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(t, Op::SliceCols(x, start), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let tail = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.shape()[1..] != tail[..] {
                return Err(Error::shape("concat_rows", format!("{:?} vs {tail:?}", tp.shape())));
            }
            rows += tp.shape()[0];
            data.extend_from_slice(tp.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(shape, data)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (rows, _) = require_2d("concat_cols", self.value(*first))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = require_2d("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::shape("concat_cols", format!("{r} rows vs {rows}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        let ng = self.ng(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum::<f64>();
        let ng = self.ng(&[x]);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        let ng = self.ng(&[x]);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Per-row negative log-likelihood of integer targets under row softmax.
    /// Output is a vector with one entry per row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = require_2d("cross_entropy", tl)?;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} rows, {} targets", targets.len()),
            ));
        }
        let mut probs = tl.data().to_vec();
        let mut nll = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    size: cols,
                });
            }
            let row = &mut probs[r * cols..(r + 1) * cols];
            let mut logp = row.to_vec();
            log_softmax_in_place(&mut logp);
            nll.push(-logp[t]);
            for (p, lp) in row.iter_mut().zip(&logp) {
                *p = lp.exp();
            }
        }
        let t = Tensor::vector(nll);
        let ng = self.ng(&[logits]);
        self.push_checked(
            "cross_entropy",
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if want(*a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    let ga = matmul_raw(gy.data(), &bt, m, n, k);
                    accumulate(grads, *a, Tensor::matrix(m, k, ga)?);
                }
                if want(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    let gb = matmul_raw(&at, gy.data(), k, m, n);
                    accumulate(grads, *b, Tensor::matrix(k, n, gb)?);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let g = transpose_raw(gy.data(), r, c);
                accumulate(grads, *a, Tensor::matrix(c, r, g)?);
            }
            Op::Add(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if want(*b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::AddRow(x, row) => {
                if want(*x) {
                    accumulate(grads, *x, gy.clone());
                }
                if want(*row) {
                    let tr = self.value(*row);
                    let cols = tr.numel();
                    let mut g = vec![0.0; cols];
                    for chunk in gy.data().chunks(cols) {
                        for (a, b) in g.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    accumulate(grads, *row, Tensor::new(tr.shape().to_vec(), g)?);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if want(*a) {
                    let g = gy.data().iter().zip(tb.data()).map(|(g, v)| g * v).collect();
                    accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), g)?);
                }
                if want(*b) {
                    let g = gy.data().iter().zip(ta.data()).map(|(g, v)| g * v).collect();
                    accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), g)?);
                }
            }
            Op::MulCol(x, col) => {
                let (tx, tc) = (self.value(*x), self.value(*col));
                let cols = tx.cols();
                if want(*x) {
                    let mut g = gy.data().to_vec();
                    for (i, chunk) in g.chunks_mut(cols).enumerate() {
                        let s = tc.data()[i];
                        chunk.iter_mut().for_each(|v| *v *= s);
                    }
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), g)?);
                }
                if want(*col) {
                    let g = gy
                        .data()
                        .chunks(cols)
                        .zip(tx.data().chunks(cols))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(grads, *col, Tensor::new(tc.shape().to_vec(), g)?);
                }
            }
            Op::ScaleBy(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let sv = ts.data()[0];
                if want(*x) {
                    let g = gy.data().iter().map(|g| g * sv).collect();
                    accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), g)?);
                }
                if want(*s) {
                    let g: f64 = gy.data().iter().zip(tx.data()).map(|(g, v)| g * v).sum();
                    accumulate(grads, *s, Tensor::new(ts.shape().to_vec(), vec![g])?);
                }
            }
            Op::Affine(x, a) => {
                let g = gy.data().iter().map(|g| g * a).collect();
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::SoftmaxRows(x) => {
                let cols = y.cols();
                let mut g = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(cols).zip(gy.data().chunks(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    g.extend(yr.iter().zip(gr).map(|(p, gv)| p * (gv - dot)));
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::LogSoftmaxRows(x) => {
                let cols = y.cols();
                let mut g = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(cols).zip(gy.data().chunks(cols)) {
                    let total: f64 = gr.iter().sum();
                    g.extend(yr.iter().zip(gr).map(|(lp, gv)| gv - lp.exp() * total));
                }
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::Sigmoid(x) => {
                let g = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let g = gy
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(g, v)| g * gelu_grad(*v))
                    .collect();
                accumulate(grads, *x, Tensor::new(y.shape().to_vec(), g)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let cols = y.cols();
                let gv = self.value(*gain).data();
                if want(*x) {
                    let n = cols as f64;
                    let mut g = Vec::with_capacity(y.numel());
                    for (r, (gr, hr)) in gy.data().chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        g.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| inv / n * (n * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    accumulate(grads, *x, Tensor::new(y.shape().to_vec(), g)?);
                }
                if want(*gain) {
                    let mut g = vec![0.0; cols];
                    for (gr, hr) in gy.data().chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            g[j] += gr[j] * hr[j];
                        }
                    }
                    let shape = self.value(*gain).shape().to_vec();
                    accumulate(grads, *gain, Tensor::new(shape, g)?);
                }
                if want(*bias) {
                    let mut g = vec![0.0; cols];
                    for gr in gy.data().chunks(cols) {
                        for j in 0..cols {
                            g[j] += gr[j];
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::new(shape, g)?);
                }
            }
            Op::GatherRows(table, idx) => {
                let tt = self.value(*table);
                let cols = tt.cols();
                let mut g = Tensor::zeros(tt.shape());
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut g.data_mut()[i * cols..(i + 1) * cols];
                    for (o, v) in dst.iter_mut().zip(gy.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *table, g);
            }
            Op::ScatterRows(src, idx) => {
                let cols = y.cols();
                let mut data = Vec::with_capacity(idx.len() * cols);
                for &i in idx {
                    data.extend_from_slice(gy.row(i));
                }
                accumulate(grads, *src, Tensor::matrix(idx.len(), cols, data)?);
            }
            Op::GatherPerRow(x, idx) => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let k = y.cols();
                let mut g = Tensor::zeros(tx.shape());
                for (r, cols_r) in idx.iter().enumerate() {
                    for (j, &c) in cols_r.iter().enumerate() {
                        g.data_mut()[r * cols + c] += gy.data()[r * k + j];
                    }
                }
                accumulate(grads, *x, g);
            }
            Op::ScatterPerRow(src, idx) => {
                let k = self.value(*src).cols();
                let mut data = Vec::with_capacity(idx.len() * k);
                for (r, cols_r) in idx.iter().enumerate() {
                    for &c in cols_r {
                        data.push(gy.get(r, c));
                    }
                }
                accumulate(grads, *src, Tensor::matrix(idx.len(), k, data)?);
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let inner: usize = tx.shape()[1..].iter().product();
                let mut g = Tensor::zeros(tx.shape());
                g.data_mut()[start * inner..start * inner + gy.numel()].copy_from_slice(gy.data());
                accumulate(grads, *x, g);
            }
            Op::SliceCols(x, start) => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let k = y.cols();
                let mut g = Tensor::zeros(tx.shape());
                for r in 0..y.rows() {
                    g.data_mut()[r * cols + start..r * cols + start + k].copy_from_slice(gy.row(r));
                }
                accumulate(grads, *x, g);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.numel();
                    if want(p) {
                        let g = gy.data()[offset..offset + n].to_vec();
                        accumulate(grads, p, Tensor::new(tp.shape().to_vec(), g)?);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let c = tp.cols();
                    if want(p) {
                        let mut g = Vec::with_capacity(tp.numel());
                        for r in 0..tp.rows() {
                            g.extend_from_slice(&gy.row(r)[offset..offset + c]);
                        }
                        accumulate(grads, p, Tensor::new(tp.shape().to_vec(), g)?);
                    }
                    offset += c;
                }
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                accumulate(grads, *x, Tensor::full(self.value(*x).shape(), g));
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let g = gy.data()[0] / tx.numel() as f64;
                accumulate(grads, *x, Tensor::full(tx.shape(), g));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let tl = self.value(*logits);
                let cols = tl.cols();
                let mut g = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let scale = gy.data()[r];
                    let row = &mut g[r * cols..(r + 1) * cols];
                    row[t] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                accumulate(grads, *logits, Tensor::new(tl.shape().to_vec(), g)?);
            }
        }
        Ok(())
    }
}
