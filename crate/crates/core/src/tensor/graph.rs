use super::kernels::{self, ConvDims};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise and row-wise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Sigmoid,
    Relu,
    Tanh,
    /// Normalizes each row over the last axis (no affine part).
    LayerNorm,
    /// Softmax over the last axis.
    Softmax,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MulCols(Var, Var),
    MulRows(Var, Var),
    AffineCols { x: Var, mul: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm { x: Var, yhat: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    /// Output element `o` was taken from input element `src[o]`; `None` marks a zero fill.
    Select { x: Var, src: Vec<Option<usize>> },
    Conv2d { x: Var, w: Var, dims: ConvDims },
    PixelShuffle { x: Var, h: usize, w: usize, c: usize, r: usize },
    PixelUnshuffle { x: Var, h: usize, w: usize, c: usize, r: usize },
    Sum(Var),
    Mean(Var),
    Chamfer { p: Var, q: Var, p_nn: Vec<usize>, q_nn: Vec<usize> },
    Focal { pred: Var, target: Vec<f64>, clamp: f64, norm: f64 },
    SmoothL1 { pred: Var, target: Vec<f64>, mask: Vec<bool>, norm: f64 },
}

#[derive(Clone, Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
}

/// Record of executed operations, in execution order.
///
/// Every node's inputs precede it, so [`Graph::backward`] walks the nodes
/// in reverse order exactly once.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf; it is tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let tracked = t.requires_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Inserts an untracked leaf.
    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn constant_f64(&mut self, shape: &[usize], data: &[f64]) -> Result<Var> {
        Ok(self.constant(Tensor::from_f64(shape, data)?))
    }

    /// Copies `v` into a fresh untracked leaf: gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(Tensor { grad: None, ..t })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn f64s(&self, v: Var) -> Vec<f64> {
        self.data(v).iter().map(|x| x.as_f64()).collect()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let value = Tensor::new(shape, data.into_iter().map(T::from_f64).collect())?;
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("{op}: expected a matrix, got {s:?}"))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(&self.f64s(a), &self.f64s(b), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = kernels::transpose(&self.f64s(a), r, c);
        self.push(vec![c, r], out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.f64s(a).iter().zip(self.f64s(b)).map(|(x, y)| x + y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.f64s(a).iter().zip(self.f64s(b)).map(|(x, y)| x - y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.f64s(a).iter().zip(self.f64s(b)).map(|(x, y)| x * y).collect();
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.f64s(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), &[a])
    }

    /// Adds a vector of length `last_dim(x)` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(b).numel() != c {
            return Err(shape_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.f64s(b);
        let mut out = self.f64s(x);
        for row in out.chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::AddBias(x, b), &[x, b])
    }

    /// Multiplies every row of `x` elementwise by a vector of length `last_dim(x)`.
    pub fn mul_cols(&mut self, x: Var, g: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.value(g).numel() != c {
            return Err(shape_err("mul_cols", self.shape(x), self.shape(g)));
        }
        let gv = self.f64s(g);
        let mut out = self.f64s(x);
        for row in out.chunks_mut(c) {
            for (o, s) in row.iter_mut().zip(&gv) {
                *o *= s;
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::MulCols(x, g), &[x, g])
    }

    /// Scales row `r` of `x[N×C]` by `s[r]`, with `s` of shape `[N×1]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(s).numel() != rows {
            return Err(shape_err("mul_rows", self.shape(x), self.shape(s)));
        }
        let c = self.value(x).last_dim();
        let sv = self.f64s(s);
        let mut out = self.f64s(x);
        for (row, k) in out.chunks_mut(c).zip(&sv) {
            for o in row {
                *o *= k;
            }
        }
        self.push(self.shape(x).to_vec(), out, Op::MulRows(x, s), &[x, s])
    }

    /// `x[.., j] * mul[j] + add[j]` with constant per-column coefficients.
    pub fn affine_cols(&mut self, x: Var, mul: &[f64], add: &[f64]) -> Result<Var> {
        let c = self.value(x).last_dim();
        if mul.len() != c || add.len() != c {
            return Err(shape_err("affine_cols", self.shape(x), &[mul.len(), add.len()]));
        }
        let mut out = self.f64s(x);
        for row in out.chunks_mut(c) {
            for ((o, m), a) in row.iter_mut().zip(mul).zip(add) {
                *o = *o * m + a;
            }
        }
        let op = Op::AffineCols { x, mul: mul.to_vec() };
        self.push(self.shape(x).to_vec(), out, op, &[x])
    }

    // ---- nonlinearities -------------------------------------------------

    pub fn elementwise(&mut self, x: Var, f: Elementwise) -> Result<Var> {
        match f {
            Elementwise::Sigmoid => self.sigmoid(x),
            Elementwise::Relu => self.relu(x),
            Elementwise::Tanh => self.tanh(x),
            Elementwise::LayerNorm => self.layernorm(x),
            Elementwise::Softmax => self.softmax(x),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.f64s(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.f64s(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.f64s(x).iter().map(|&v| v.tanh()).collect();
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), &[x])
    }

    pub fn layernorm(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let (y, inv_std) = kernels::layernorm_rows(&self.f64s(x), c);
        let op = Op::LayerNorm { x, yhat: y.clone(), inv_std };
        self.push(self.shape(x).to_vec(), y, op, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let y = kernels::softmax_rows(&self.f64s(x), c);
        self.push(self.shape(x).to_vec(), y, Op::Softmax(x), &[x])
    }

    /// Multi-head scaled dot-product attention of `q[Nq×C]` over
    /// `k, v[Nk×C]`, heads taking consecutive column blocks. Returns the
    /// merged head outputs `[Nq×C]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (nq, c) = self.dims2(q, "attention")?;
        let (nk, ck) = self.dims2(k, "attention")?;
        if ck != c || self.shape(v) != self.shape(k) {
            return Err(shape_err("attention", self.shape(q), self.shape(k)));
        }
        if heads == 0 || c % heads != 0 {
            return Err(Error::InvalidArgument(format!("attention width {c} is not divisible by {heads} heads")));
        }
        let (out, probs) = kernels::attention(&self.f64s(q), &self.f64s(k), &self.f64s(v), nq, nk, c, heads);
        self.push(vec![nq, c], out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(shape_err("reshape", self.shape(x), shape));
        }
        let out = self.f64s(x);
        self.push(shape.to_vec(), out, Op::Reshape(x), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_rows: no inputs".into()))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend(self.f64s(p));
        }
        self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::Shape(format!(
                "slice_rows: rows {start}..{} out of {r}",
                start + len
            )));
        }
        let out = self.f64s(x)[start * c..(start + len) * c].to_vec();
        self.push(vec![len, c], out, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Shape("concat_cols: no inputs".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let vals: Vec<Vec<f64>> = parts.iter().map(|&p| self.f64s(p)).collect();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (v, &w) in vals.iter().zip(&widths) {
                out.extend_from_slice(&v[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols: columns {start}..{} out of {c}",
                start + len
            )));
        }
        let xv = self.f64s(x);
        let out = (0..r)
            .flat_map(|i| xv[i * c + start..i * c + start + len].to_vec())
            .collect();
        self.push(vec![r, len], out, Op::SliceCols { x, start }, &[x])
    }

    /// Row `r` of the output is row `idx[r]` of `x`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!("gather_rows: index {bad} out of {rows}")));
        }
        let xv = self.f64s(x);
        let out = idx.iter().flat_map(|&i| xv[i * c..(i + 1) * c].to_vec()).collect();
        let op = Op::GatherRows { x, idx: idx.to_vec() };
        self.push(vec![idx.len(), c], out, op, &[x])
    }

    /// Channel-wise max over consecutive groups of `group` rows:
    /// `[M·group × C] → [M × C]`.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, c) = self.dims2(x, "group_max")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::Shape(format!("group_max: {rows} rows not divisible by {group}")));
        }
        let xv = self.f64s(x);
        let m = rows / group;
        let mut out = vec![0.0; m * c];
        let mut src = vec![None; m * c];
        for gi in 0..m {
            for ch in 0..c {
                let mut best = gi * group * c + ch;
                for r in 1..group {
                    let k = (gi * group + r) * c + ch;
                    if xv[k] > xv[best] {
                        best = k;
                    }
                }
                out[gi * c + ch] = xv[best];
                src[gi * c + ch] = Some(best);
            }
        }
        self.push(vec![m, c], out, Op::Select { x, src }, &[x])
    }

    /// Channel-wise max of the rows of `x[N×C]` falling into each of
    /// `cells` bins. Rows mapped to `None` are dropped; empty bins are zero.
    /// Output shape is `out_shape`, whose last extent must be `C` and whose
    /// element count must be `cells · C`.
    pub fn scatter_max(&mut self, x: Var, bins: &[Option<usize>], cells: usize, out_shape: &[usize]) -> Result<Var> {
        let (rows, c) = self.dims2(x, "scatter_max")?;
        if bins.len() != rows
            || out_shape.last() != Some(&c)
            || out_shape.iter().product::<usize>() != cells * c
        {
            return Err(shape_err("scatter_max", self.shape(x), out_shape));
        }
        let xv = self.f64s(x);
        let mut src: Vec<Option<usize>> = vec![None; cells * c];
        for (r, bin) in bins.iter().enumerate() {
            let Some(cell) = *bin else { continue };
            if cell >= cells {
                return Err(Error::Shape(format!("scatter_max: bin {cell} out of {cells}")));
            }
            for ch in 0..c {
                let k = r * c + ch;
                let slot = &mut src[cell * c + ch];
                match *slot {
                    Some(prev) if xv[prev] >= xv[k] => {}
                    _ => *slot = Some(k),
                }
            }
        }
        let out = src.iter().map(|s| s.map_or(0.0, |k| xv[k])).collect();
        self.push(out_shape.to_vec(), out, Op::Select { x, src }, &[x])
    }

    /// Same-padded stride-1 convolution: `x[H×W×Cin]`, `w[k×k×Cin×Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        let (&[height, width, cin], &[k, k2, wcin, cout]) = (xs, ws) else {
            return Err(shape_err("conv2d", xs, ws));
        };
        if k != k2 || k % 2 == 0 || cin != wcin {
            return Err(shape_err("conv2d", xs, ws));
        }
        let dims = ConvDims { height, width, cin, cout, kernel: k };
        let out = kernels::conv2d(&self.f64s(x), &self.f64s(w), dims);
        self.push(vec![height, width, cout], out, Op::Conv2d { x, w, dims }, &[x, w])
    }

    /// `[H×W×C] → [rH×rW×C/r²]`; see [`kernels::pixel_shuffle`] for the layout.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let &[h, w, c] = self.shape(x) else {
            return Err(Error::Shape(format!("pixel_shuffle: expected [H, W, C], got {:?}", self.shape(x))));
        };
        if r == 0 || c % (r * r) != 0 {
            return Err(Error::Shape(format!("pixel_shuffle: {c} channels not divisible by {}", r * r)));
        }
        let out = kernels::pixel_shuffle(&self.f64s(x), h, w, c, r);
        let op = Op::PixelShuffle { x, h, w, c, r };
        self.push(vec![r * h, r * w, c / (r * r)], out, op, &[x])
    }

    /// Inverse of [`Graph::pixel_shuffle`]: `[rH×rW×C] → [H×W×r²C]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let &[hh, ww, cc] = self.shape(x) else {
            return Err(Error::Shape(format!("pixel_unshuffle: expected [H, W, C], got {:?}", self.shape(x))));
        };
        if r == 0 || hh % r != 0 || ww % r != 0 {
            return Err(Error::Shape(format!("pixel_unshuffle: {hh}×{ww} not divisible by {r}")));
        }
        let (h, w, c) = (hh / r, ww / r, cc * r * r);
        let out = kernels::pixel_unshuffle(&self.f64s(x), h, w, c, r);
        let op = Op::PixelUnshuffle { x, h, w, c, r };
        self.push(vec![h, w, c], out, op, &[x])
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.f64s(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.f64s(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![1], vec![s], Op::Mean(x), &[x])
    }

    /// Symmetric Chamfer distance between `p[N×3]` and `q[M×3]`: the sum
    /// over both clouds of squared distances to the nearest point of the
    /// other cloud. Ties resolve to the lowest index.
    pub fn chamfer(&mut self, p: Var, q: Var) -> Result<Var> {
        let (n, pc) = self.dims2(p, "chamfer")?;
        let (m, qc) = self.dims2(q, "chamfer")?;
        if pc != 3 || qc != 3 {
            return Err(shape_err("chamfer", self.shape(p), self.shape(q)));
        }
        let (pv, qv) = (self.f64s(p), self.f64s(q));
        let (p_nn, dp) = crate::geometry::nearest(&pv, &qv, n, m);
        let (q_nn, dq) = crate::geometry::nearest(&qv, &pv, m, n);
        let total = dp.iter().sum::<f64>() + dq.iter().sum::<f64>();
        self.push(vec![1], vec![total], Op::Chamfer { p, q, p_nn, q_nn }, &[p, q])
    }

    /// Penalty-reduced focal loss of probabilities `pred` against soft
    /// targets. Cells with target exactly 1 are positives; the sum is
    /// divided by the positive count (at least 1). Probabilities are
    /// clamped to `[clamp, 1 - clamp]` inside the logarithms.
    pub fn focal_loss(&mut self, pred: Var, target: &[f64], clamp: f64) -> Result<Var> {
        if self.value(pred).numel() != target.len() {
            return Err(shape_err("focal_loss", self.shape(pred), &[target.len()]));
        }
        let pv = self.f64s(pred);
        let npos = target.iter().filter(|&&t| t == 1.0).count();
        let norm = npos.max(1) as f64;
        let total: f64 = pv
            .iter()
            .zip(target)
            .map(|(&p, &t)| focal_term(p, t, clamp).0)
            .sum();
        let op = Op::Focal { pred, target: target.to_vec(), clamp, norm };
        self.push(vec![1], vec![total / norm], op, &[pred])
    }

    /// Mean smooth-L1 over the elements where `mask` is set.
    pub fn smooth_l1(&mut self, pred: Var, target: &[f64], mask: &[bool]) -> Result<Var> {
        let numel = self.value(pred).numel();
        if numel != target.len() || numel != mask.len() {
            return Err(shape_err("smooth_l1", self.shape(pred), &[target.len()]));
        }
        let pv = self.f64s(pred);
        let count = mask.iter().filter(|&&m| m).count();
        let norm = count.max(1) as f64;
        let total: f64 = pv
            .iter()
            .zip(target)
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&p, &t), _)| smooth_l1(p - t))
            .sum();
        let op = Op::SmoothL1 { pred, target: target.to_vec(), mask: mask.to_vec(), norm };
        self.push(vec![1], vec![total / norm], op, &[pred])
    }

    // ---- reverse pass ---------------------------------------------------

    /// Accumulates `d loss / d node` into the `grad` of every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        if !self.is_tracked(loss) {
            return Err(Error::InvalidArgument("backward: loss does not depend on any tracked tensor".into()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].tracked {
                continue;
            }
            for (v, dv) in self.input_grads(i, &g) {
                if self.nodes[v.0].tracked {
                    accumulate(&mut adj[v.0], dv);
                }
            }
            let value = &mut self.nodes[i].value;
            match &mut value.grad {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a = T::from_f64(a.as_f64() + d);
                    }
                }
                None => value.grad = Some(g.into_iter().map(T::from_f64).collect()),
            }
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let out = &self.nodes[i].value;
        let y = || out.data().iter().map(|v| v.as_f64());
        match &self.nodes[i].op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let da = kernels::matmul_nt(g, &self.f64s(*b), m, n, k);
                let db = kernels::matmul_tn(&self.f64s(*a), g, m, k, n);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                vec![(*a, kernels::transpose(g, c, r))]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.f64s(*a), self.f64s(*b));
                let da = g.iter().zip(&bv).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(&av).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::AddBias(x, b) => {
                let c = self.value(*x).last_dim();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::MulCols(x, s) => {
                let c = self.value(*x).last_dim();
                let (xv, sv) = (self.f64s(*x), self.f64s(*s));
                let mut dx = vec![0.0; g.len()];
                let mut ds = vec![0.0; c];
                for (r, (grow, xrow)) in g.chunks(c).zip(xv.chunks(c)).enumerate() {
                    for j in 0..c {
                        dx[r * c + j] = grow[j] * sv[j];
                        ds[j] += grow[j] * xrow[j];
                    }
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::MulRows(x, s) => {
                let c = self.value(*x).last_dim();
                let (xv, sv) = (self.f64s(*x), self.f64s(*s));
                let mut dx = vec![0.0; g.len()];
                let mut ds = vec![0.0; sv.len()];
                for (r, (grow, xrow)) in g.chunks(c).zip(xv.chunks(c)).enumerate() {
                    for j in 0..c {
                        dx[r * c + j] = grow[j] * sv[r];
                        ds[r] += grow[j] * xrow[j];
                    }
                }
                vec![(*x, dx), (*s, ds)]
            }
            Op::AffineCols { x, mul } => {
                let c = mul.len();
                let dx = g.iter().enumerate().map(|(k, v)| v * mul[k % c]).collect();
                vec![(*x, dx)]
            }
            Op::Relu(x) => {
                let dx = g.iter().zip(y()).map(|(d, yv)| if yv > 0.0 { *d } else { 0.0 }).collect();
                vec![(*x, dx)]
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(y()).map(|(d, s)| d * s * (1.0 - s)).collect();
                vec![(*x, dx)]
            }
            Op::Tanh(x) => {
                let dx = g.iter().zip(y()).map(|(d, t)| d * (1.0 - t * t)).collect();
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, yhat, inv_std } => {
                let c = self.value(*x).last_dim();
                vec![(*x, kernels::layernorm_rows_backward(yhat, inv_std, g, c))]
            }
            Op::Softmax(x) => {
                let c = self.value(*x).last_dim();
                let yv: Vec<f64> = y().collect();
                vec![(*x, kernels::softmax_rows_backward(&yv, g, c))]
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (nq, c) = (self.shape(*q)[0], self.shape(*q)[1]);
                let nk = self.shape(*k)[0];
                let (dq, dk, dv) = kernels::attention_backward(
                    &self.f64s(*q),
                    &self.f64s(*k),
                    &self.f64s(*v),
                    probs,
                    g,
                    nq,
                    nk,
                    c,
                    *heads,
                );
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::ConcatRows(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).numel();
                        let d = g[off..off + n].to_vec();
                        off += n;
                        (p, d)
                    })
                    .collect()
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).last_dim();
                let mut dx = vec![0.0; self.value(*x).numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                vec![(*x, dx)]
            }
            Op::ConcatCols(parts) => {
                let total = out.last_dim();
                let rows = out.rows();
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = self.value(p).last_dim();
                        let d = (0..rows)
                            .flat_map(|r| g[r * total + off..r * total + off + w].to_vec())
                            .collect();
                        off += w;
                        (p, d)
                    })
                    .collect()
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).last_dim();
                let w = out.last_dim();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, grow) in g.chunks(w).enumerate() {
                    dx[r * c + start..r * c + start + w].copy_from_slice(grow);
                }
                vec![(*x, dx)]
            }
            Op::GatherRows { x, idx } => {
                let c = self.value(*x).last_dim();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        dx[src * c + j] += g[r * c + j];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Select { x, src } => {
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (o, s) in src.iter().enumerate() {
                    if let Some(k) = s {
                        dx[*k] += g[o];
                    }
                }
                vec![(*x, dx)]
            }
            Op::Conv2d { x, w, dims } => {
                let (dx, dw) = kernels::conv2d_backward(&self.f64s(*x), &self.f64s(*w), g, *dims);
                vec![(*x, dx), (*w, dw)]
            }
            Op::PixelShuffle { x, h, w, c, r } => {
                vec![(*x, kernels::pixel_unshuffle(g, *h, *w, *c, *r))]
            }
            Op::PixelUnshuffle { x, h, w, c, r } => {
                vec![(*x, kernels::pixel_shuffle(g, *h, *w, *c, *r))]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Chamfer { p, q, p_nn, q_nn } => {
                let (pv, qv) = (self.f64s(*p), self.f64s(*q));
                let mut dp = vec![0.0; pv.len()];
                let mut dq = vec![0.0; qv.len()];
                for (i, &j) in p_nn.iter().enumerate() {
                    for a in 0..3 {
                        let d = 2.0 * (pv[i * 3 + a] - qv[j * 3 + a]) * g[0];
                        dp[i * 3 + a] += d;
                        dq[j * 3 + a] -= d;
                    }
                }
                for (j, &i) in q_nn.iter().enumerate() {
                    for a in 0..3 {
                        let d = 2.0 * (qv[j * 3 + a] - pv[i * 3 + a]) * g[0];
                        dq[j * 3 + a] += d;
                        dp[i * 3 + a] -= d;
                    }
                }
                vec![(*p, dp), (*q, dq)]
            }
            Op::Focal { pred, target, clamp, norm } => {
                let pv = self.f64s(*pred);
                let dx = pv
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| focal_term(p, t, *clamp).1 * g[0] / norm)
                    .collect();
                vec![(*pred, dx)]
            }
            Op::SmoothL1 { pred, target, mask, norm } => {
                let pv = self.f64s(*pred);
                let dx = pv
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((&p, &t), &m)| {
                        if !m {
                            return 0.0;
                        }
                        let d = p - t;
                        let s = if d.abs() < 1.0 { d } else { d.signum() };
                        s * g[0] / norm
                    })
                    .collect();
                vec![(*pred, dx)]
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, d: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(d) {
                *a += v;
            }
        }
        None => *slot = Some(d),
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Loss value and derivative of one focal-loss cell.
fn focal_term(p: f64, t: f64, clamp: f64) -> (f64, f64) {
    let inside = p > clamp && p < 1.0 - clamp;
    let pc = p.clamp(clamp, 1.0 - clamp);
    let (l, dl) = if t == 1.0 {
        let q = 1.0 - pc;
        (-q * q * pc.ln(), 2.0 * q * pc.ln() - q * q / pc)
    } else {
        let wgt = (1.0 - t).powi(4);
        let lq = (1.0 - pc).ln();
        (-wgt * pc * pc * lq, -wgt * (2.0 * pc * lq - pc * pc / (1.0 - pc)))
    };
    (l, if inside { dl } else { 0.0 })
}
