//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. `backward` walks the tape in exact reverse
//! order, so nodes only ever refer to earlier nodes.

use std::collections::HashSet;

use super::real::{gemm, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One attention block: queries `q_start..q_start+q_len` attend to keys
/// `k_start..k_start+k_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// How packed rows are grouped into independent attention problems.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub segments: Vec<Segment>,
    pub heads: usize,
    /// Query `i` of a segment may only see keys `0..=i`.
    pub causal: bool,
    /// Per key row; `false` keys are never attended to.
    pub key_valid: Option<Vec<bool>>,
}

/// A user-defined differentiable operation.
pub trait CustomOp<F: Real> {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<F>]) -> Result<Tensor<F>>;
    /// Gradient with respect to each input, given the upstream gradient.
    fn backward(
        &self,
        inputs: &[&Tensor<F>],
        output: &Tensor<F>,
        grad_out: &Tensor<F>,
    ) -> Vec<Option<Tensor<F>>>;
}

enum Op<F: Real> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: F },
    MulConst { x: Var, c: Vec<F> },
    AddConst { x: Var },
    Relu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    RmsNorm { x: Var, gain: Var, inv: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<F>, count: usize },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    DotConst { x: Var, c: Vec<F> },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterAddRows { x: Var, idx: Vec<usize> },
    ScaleRows { x: Var, w: Var },
    GatherFlat { x: Var, idx: Vec<usize> },
    GroupNormalize { x: Var, groups: Vec<(usize, usize)>, sums: Vec<F> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Outer { a: Var, b: Var },
    Reshape(Var),
    Transpose(Var),
    Attention { q: Var, k: Var, v: Var, layout: AttentionLayout, probs: Vec<F> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<F>> },
}

impl<F: Real> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::AddConst { .. } => "add_const",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanRows(_) => "mean_rows",
            Op::DotConst { .. } => "dot_const",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::ScaleRows { .. } => "scale_rows",
            Op::GatherFlat { .. } => "gather_flat",
            Op::GroupNormalize { .. } => "group_normalize",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Outer { .. } => "outer",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
            Op::Attention { .. } => "attention",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRow { x, bias } => vec![*x, *bias],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::ScaleRows { x, w } => vec![*x, *w],
            Op::Outer { a, b } => vec![*a, *b],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::ConcatCols(parts) => parts.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
            Op::Scale { x, .. }
            | Op::MulConst { x, .. }
            | Op::AddConst { x }
            | Op::Relu(x)
            | Op::Softmax { x, .. }
            | Op::CrossEntropy { logits: x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::MeanRows(x)
            | Op::DotConst { x, .. }
            | Op::GatherRows { x, .. }
            | Op::ScatterAddRows { x, .. }
            | Op::GatherFlat { x, .. }
            | Op::GroupNormalize { x, .. }
            | Op::SliceCols { x, .. }
            | Op::Reshape(x)
            | Op::Transpose(x) => vec![*x],
        }
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// The tape. Single-threaded; independent graphs may live on different threads.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last `backward`; `None` if unreached.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.shape(v), g.clone()).expect("grad shape"))
    }

    /// Gradient, with unreachable nodes reported as zeros.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<F> {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(ta, tb, m, k, n, self.value(a).data(), self.value(b).data(), &mut out, false);
        self.push(Tensor::from_vec(&[m, n], out)?, Op::MatMul { a, b, ta, tb })
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(va.shape(), data).expect("zip shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds `bias` (length = last dim) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).len() != d {
            return Err(Error::shape("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(d) {
            row.iter_mut().zip(&b).for_each(|(v, &bb)| *v += bb);
        }
        let out = Tensor::from_vec(vx.shape(), data)?;
        self.push(out, Op::AddRow { x, bias })
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    /// Elementwise product with a constant (dropout masks and the like).
    pub fn mul_const(&mut self, x: Var, c: &Tensor<F>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("mul_const", self.shape(x), c.shape()));
        }
        let vx = self.value(x);
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let out = Tensor::from_vec(vx.shape(), data)?;
        self.push(
            out,
            Op::MulConst {
                x,
                c: c.data().to_vec(),
            },
        )
    }

    pub fn add_const(&mut self, x: Var, c: &Tensor<F>) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape("add_const", self.shape(x), c.shape()));
        }
        let vx = self.value(x);
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a + b).collect();
        let out = Tensor::from_vec(vx.shape(), data)?;
        self.push(out, Op::AddConst { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        self.push(out, Op::Relu(x))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::invalid(format!(
                "softmax: empty or missing axis {axis} for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut mx = F::neg_infinity();
                for a in 0..len {
                    mx = mx.max(src[at(a)]);
                }
                let mut sum = F::zero();
                for a in 0..len {
                    let e = (src[at(a)] - mx).exp();
                    out[at(a)] = e;
                    sum += e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / sum;
                }
            }
        }
        let out = Tensor::from_vec(&shape, out)?;
        self.push(out, Op::Softmax { x, outer, len, inner })
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last dimension.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(gain).len() != d {
            return Err(Error::shape("rms_norm", self.shape(x), self.shape(gain)));
        }
        let eps = F::from_f64_lossy(eps);
        let g = self.value(gain).data().to_vec();
        let vx = self.value(x);
        let dn = F::from_usize(d).unwrap_or_else(F::one);
        let mut data = vx.data().to_vec();
        let mut inv = Vec::with_capacity(data.len() / d.max(1));
        for row in data.chunks_mut(d) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / dn;
            let r = F::one() / (ms + eps).sqrt();
            inv.push(r);
            row.iter_mut().zip(&g).for_each(|(v, &gg)| *v = *v * r * gg);
        }
        let out = Tensor::from_vec(vx.shape(), data)?;
        self.push(out, Op::RmsNorm { x, gain, inv })
    }

    /// Mean negative log-likelihood of `targets` under row softmax of `logits`.
    /// Rows whose target equals `ignore_index` are skipped.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", &[n, v], &[targets.len()]));
        }
        let mut tg = Vec::with_capacity(n);
        for &t in targets {
            if Some(t) == ignore_index {
                tg.push(None);
            } else if t >= v {
                return Err(Error::invalid(format!(
                    "cross_entropy: target {t} outside vocabulary of {v}"
                )));
            } else {
                tg.push(Some(t));
            }
        }
        let count = tg.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy: every position is ignored"));
        }
        let src = self.value(logits).data();
        let mut probs = vec![F::zero(); n * v];
        let mut total = 0.0f64;
        for (r, t) in tg.iter().enumerate() {
            let row = &src[r * v..(r + 1) * v];
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut sum = F::zero();
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[r * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[r * v + j] = probs[r * v + j] / sum;
            }
            if let Some(t) = t {
                let lse = mx + sum.ln();
                total += (lse - row[*t]).as_f64();
            }
        }
        let out = Tensor::scalar(F::from_f64_lossy(total / count as f64));
        self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: tg,
                probs,
                count,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = vx.data().iter().copied().sum::<F>() / F::from_usize(vx.len()).unwrap();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Column means of a rank-2 tensor.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "mean_rows")?;
        if n == 0 {
            return Err(Error::invalid("mean_rows of zero rows"));
        }
        let mut out = vec![F::zero(); d];
        for row in self.value(x).data().chunks(d) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let nn = F::from_usize(n).unwrap();
        out.iter_mut().for_each(|o| *o = *o / nn);
        self.push(Tensor::from_vec(&[d], out)?, Op::MeanRows(x))
    }

    /// `Σ c_i x_i` with constant weights `c`.
    pub fn dot_const(&mut self, x: Var, c: &[F]) -> Result<Var> {
        if self.value(x).len() != c.len() {
            return Err(Error::shape("dot_const", self.shape(x), &[c.len()]));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(c)
            .map(|(&a, &b)| a * b)
            .sum::<F>();
        self.push(Tensor::scalar(s), Op::DotConst { x, c: c.to_vec() })
    }

    /// Rows `idx` of `x` (repeats allowed). Embedding lookup is this op.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!("gather_rows: row {i} out of {n}")));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec(&[idx.len(), d], out)?;
        self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Output has `rows` rows; row `idx[i]` accumulates row `i` of `x`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "scatter_add_rows")?;
        if idx.len() != n {
            return Err(Error::shape("scatter_add_rows", &[n, d], &[idx.len()]));
        }
        let src = self.value(x).data();
        let mut out = vec![F::zero(); rows * d];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::invalid(format!(
                    "scatter_add_rows: row {i} out of {rows}"
                )));
            }
            out[i * d..(i + 1) * d]
                .iter_mut()
                .zip(&src[r * d..(r + 1) * d])
                .for_each(|(o, &v)| *o += v);
        }
        let out = Tensor::from_vec(&[rows, d], out)?;
        self.push(
            out,
            Op::ScatterAddRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Row `i` of `x` multiplied by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "scale_rows")?;
        if self.value(w).len() != n {
            return Err(Error::shape("scale_rows", &[n, d], self.shape(w)));
        }
        let wv = self.value(w).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (row, &s) in data.chunks_mut(d.max(1)).zip(&wv) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        self.push(Tensor::from_vec(&[n, d], data)?, Op::ScaleRows { x, w })
    }

    /// Elements at flat (row-major) positions `idx`, as a vector.
    pub fn gather_flat(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= src.len() {
                return Err(Error::invalid(format!(
                    "gather_flat: index {i} out of {}",
                    src.len()
                )));
            }
            out.push(src[i]);
        }
        let out = Tensor::from_vec(&[idx.len()], out)?;
        self.push(
            out,
            Op::GatherFlat {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// Divides each element by the sum of its group. `groups` are
    /// `(start, len)` ranges that must partition the vector.
    pub fn group_normalize(&mut self, x: Var, groups: &[(usize, usize)]) -> Result<Var> {
        let src = self.value(x).data().to_vec();
        let mut covered = 0;
        let mut out = vec![F::zero(); src.len()];
        let mut sums = Vec::with_capacity(groups.len());
        for &(s, l) in groups {
            if s != covered || s + l > src.len() || l == 0 {
                return Err(Error::invalid("group_normalize: groups must partition the input"));
            }
            covered += l;
            let sum = src[s..s + l].iter().copied().sum::<F>();
            for j in s..s + l {
                out[j] = src[j] / sum;
            }
            sums.push(sum);
        }
        if covered != src.len() {
            return Err(Error::invalid("group_normalize: groups must partition the input"));
        }
        let out = Tensor::from_vec(&[src.len()], out)?;
        self.push(
            out,
            Op::GroupNormalize {
                x,
                groups: groups.to_vec(),
                sums,
            },
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, d) = self.dims2(x, "slice_cols")?;
        if start > end || end > d {
            return Err(Error::invalid(format!(
                "slice_cols: {start}..{end} outside {d} columns"
            )));
        }
        let w = end - start;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * w);
        for r in 0..n {
            out.extend_from_slice(&src[r * d + start..r * d + end]);
        }
        let out = Tensor::from_vec(&[n, w], out)?;
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat_cols: no inputs"));
        }
        let (n, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&[n, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// `a ⊗ b` for vectors: `out[i, j] = a[i] * b[j]`.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let mut out = Vec::with_capacity(va.len() * vb.len());
        for &x in va {
            out.extend(vb.iter().map(|&y| x * y));
        }
        let out = Tensor::from_vec(&[va.len(), vb.len()], out)?;
        self.push(out, Op::Outer { a, b })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        self.push(out, Op::Transpose(x))
    }

    /// Multi-head scaled dot-product attention over packed rows.
    ///
    /// `q`, `k`, `v` are `rows×d`; each head uses a contiguous `d/heads`
    /// column block. Output is the concatenation of heads (pre-projection).
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let (nq, d) = self.dims2(q, "attention")?;
        let (nk, dk) = self.dims2(k, "attention")?;
        let (nv, dv) = self.dims2(v, "attention")?;
        if dk != d || dv != d || nv != nk {
            return Err(Error::shape("attention", &[nq, d], &[nk, dk]));
        }
        if layout.heads == 0 || d % layout.heads != 0 {
            return Err(Error::invalid(format!(
                "attention: {d} columns not divisible into {} heads",
                layout.heads
            )));
        }
        if let Some(valid) = &layout.key_valid {
            if valid.len() != nk {
                return Err(Error::shape("attention", &[nk], &[valid.len()]));
            }
        }
        for s in &layout.segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk {
                return Err(Error::invalid("attention: segment outside input rows"));
            }
            if layout.causal && s.q_len != s.k_len {
                return Err(Error::invalid("attention: causal segments must be square"));
            }
        }
        let dh = d / layout.heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![F::zero(); nq * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for s in &layout.segments {
            for h in 0..layout.heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let qrow = &qd[(s.q_start + i) * d + c0..(s.q_start + i) * d + c0 + dh];
                    scores.clear();
                    let mut mx = F::neg_infinity();
                    for j in 0..s.k_len {
                        let allowed = (!layout.causal || j <= i)
                            && layout.key_valid.as_ref().is_none_or(|kv| kv[s.k_start + j]);
                        if allowed {
                            let krow =
                                &kd[(s.k_start + j) * d + c0..(s.k_start + j) * d + c0 + dh];
                            let sc = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<F>()
                                * scale;
                            mx = mx.max(sc);
                            scores.push(Some(sc));
                        } else {
                            scores.push(None);
                        }
                    }
                    let base = probs.len();
                    probs.resize(base + s.k_len, F::zero());
                    if mx == F::neg_infinity() {
                        continue;
                    }
                    let mut sum = F::zero();
                    for (j, sc) in scores.iter().enumerate() {
                        if let Some(sc) = sc {
                            let e = (*sc - mx).exp();
                            probs[base + j] = e;
                            sum += e;
                        }
                    }
                    let orow = (s.q_start + i) * d + c0;
                    for j in 0..s.k_len {
                        let p = probs[base + j] / sum;
                        probs[base + j] = p;
                        if p != F::zero() {
                            let vrow = (s.k_start + j) * d + c0;
                            for c in 0..dh {
                                out[orow + c] += p * vd[vrow + c];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[nq, d], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        )
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp<F>>) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = inputs.iter().map(|&i| self.value(i)).collect();
        let out = op.forward(&vals)?;
        self.push(
            out,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout);
            self.grads[i] = Some(gout);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        op: self.nodes[i].op.name(),
                    });
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<F>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backprop_node(&mut self, i: usize, gout: &[F]) {
        // Temporarily move the op out so input values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = {
                    let s = self.nodes[i].value.shape();
                    (s[0], s[1])
                };
                let (ar, ac) = (self.shape(*a)[0], self.shape(*a)[1]);
                let k = if *ta { ar } else { ac };
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data().to_vec();
                    let mut da = vec![F::zero(); m * k];
                    if *ta {
                        // a is k×m: da = op(b) · goutᵀ
                        gemm(*tb, true, k, n, m, &bv, gout, &mut da, false);
                    } else {
                        // da = gout · op(b)ᵀ
                        gemm(false, !*tb, m, n, k, gout, &bv, &mut da, false);
                    }
                    add_into(self.acc(*a).unwrap(), &da);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data().to_vec();
                    let mut db = vec![F::zero(); k * n];
                    if *tb {
                        // b is n×k: db = goutᵀ · op(a)
                        gemm(true, *ta, n, m, k, gout, &av, &mut db, false);
                    } else {
                        // db = op(a)ᵀ · gout
                        gemm(!*ta, false, k, m, n, &av, gout, &mut db, false);
                    }
                    add_into(self.acc(*b).unwrap(), &db);
                }
            }
            Op::Add(a, b) => {
                if let Some(g) = self.acc(*a) {
                    add_into(g, gout);
                }
                if let Some(g) = self.acc(*b) {
                    add_into(g, gout);
                }
            }
            Op::Sub(a, b) => {
                if let Some(g) = self.acc(*a) {
                    add_into(g, gout);
                }
                if let Some(g) = self.acc(*b) {
                    g.iter_mut().zip(gout).for_each(|(x, &y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv: Vec<F> = self.value(*b).data().to_vec();
                    let g = self.acc(*a).unwrap();
                    for ((x, &y), &z) in g.iter_mut().zip(gout).zip(&bv) {
                        *x += y * z;
                    }
                }
                if self.requires_grad(*b) {
                    let av: Vec<F> = self.value(*a).data().to_vec();
                    let g = self.acc(*b).unwrap();
                    for ((x, &y), &z) in g.iter_mut().zip(gout).zip(&av) {
                        *x += y * z;
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(g) = self.acc(*x) {
                    add_into(g, gout);
                }
                let d = self.value(*bias).len();
                if let Some(g) = self.acc(*bias) {
                    for row in gout.chunks(d) {
                        add_into(g, row);
                    }
                }
            }
            Op::Scale { x, c } => {
                let c = *c;
                if let Some(g) = self.acc(*x) {
                    g.iter_mut().zip(gout).for_each(|(a, &b)| *a += b * c);
                }
            }
            Op::MulConst { x, c } => {
                if let Some(g) = self.acc(*x) {
                    for ((a, &b), &cc) in g.iter_mut().zip(gout).zip(c) {
                        *a += b * cc;
                    }
                }
            }
            Op::AddConst { x } => {
                if let Some(g) = self.acc(*x) {
                    add_into(g, gout);
                }
            }
            Op::Relu(x) => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x).data().to_vec();
                    let g = self.acc(*x).unwrap();
                    for ((a, &b), &v) in g.iter_mut().zip(gout).zip(&xv) {
                        if v > F::zero() {
                            *a += b;
                        }
                    }
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                if self.requires_grad(*x) {
                    let y = self.nodes[i].value.data().to_vec();
                    let (outer, len, inner) = (*outer, *len, *inner);
                    let g = self.acc(*x).unwrap();
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + ii;
                            let dot = (0..len).map(|a| gout[at(a)] * y[at(a)]).sum::<F>();
                            for a in 0..len {
                                g[at(a)] += y[at(a)] * (gout[at(a)] - dot);
                            }
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = self.value(*x).data().to_vec();
                let gv = self.value(*gain).data().to_vec();
                let d = gv.len();
                let dn = F::from_usize(d).unwrap();
                if self.requires_grad(*x) {
                    let g = self.acc(*x).unwrap();
                    for (r, &rr) in inv.iter().enumerate() {
                        let xs = &xv[r * d..(r + 1) * d];
                        let gs = &gout[r * d..(r + 1) * d];
                        let s = (0..d).map(|j| gv[j] * gs[j] * xs[j]).sum::<F>();
                        let c = rr * rr * rr * s / dn;
                        for j in 0..d {
                            g[r * d + j] += rr * gv[j] * gs[j] - c * xs[j];
                        }
                    }
                }
                if let Some(g) = self.acc(*gain) {
                    for (r, &rr) in inv.iter().enumerate() {
                        for j in 0..d {
                            g[j] += gout[r * d + j] * xv[r * d + j] * rr;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.shape(*logits)[1];
                let s = gout[0] / F::from_usize(*count).unwrap();
                if let Some(g) = self.acc(*logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        for j in 0..v {
                            g[r * v + j] += probs[r * v + j] * s;
                        }
                        g[r * v + t] -= s;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.acc(*x) {
                    g.iter_mut().for_each(|a| *a += gout[0]);
                }
            }
            Op::Mean(x) => {
                let n = F::from_usize(self.value(*x).len()).unwrap();
                if let Some(g) = self.acc(*x) {
                    g.iter_mut().for_each(|a| *a += gout[0] / n);
                }
            }
            Op::MeanRows(x) => {
                let n = F::from_usize(self.shape(*x)[0]).unwrap();
                let d = gout.len();
                if let Some(g) = self.acc(*x) {
                    for row in g.chunks_mut(d) {
                        row.iter_mut().zip(gout).for_each(|(a, &b)| *a += b / n);
                    }
                }
            }
            Op::DotConst { x, c } => {
                if let Some(g) = self.acc(*x) {
                    g.iter_mut().zip(c).for_each(|(a, &cc)| *a += gout[0] * cc);
                }
            }
            Op::GatherRows { x, idx } => {
                let d = self.value(*x).last_dim();
                if let Some(g) = self.acc(*x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut g[src * d..(src + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ScatterAddRows { x, idx } => {
                let d = self.value(*x).last_dim();
                if let Some(g) = self.acc(*x) {
                    for (r, &dst) in idx.iter().enumerate() {
                        add_into(&mut g[r * d..(r + 1) * d], &gout[dst * d..(dst + 1) * d]);
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let d = self.value(*x).last_dim().max(1);
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data().to_vec();
                    let g = self.acc(*x).unwrap();
                    for (r, &s) in wv.iter().enumerate() {
                        for j in 0..d {
                            g[r * d + j] += gout[r * d + j] * s;
                        }
                    }
                }
                if self.requires_grad(*w) {
                    let xv = self.value(*x).data().to_vec();
                    let g = self.acc(*w).unwrap();
                    for (r, gw) in g.iter_mut().enumerate() {
                        *gw += (0..d).map(|j| gout[r * d + j] * xv[r * d + j]).sum::<F>();
                    }
                }
            }
            Op::GatherFlat { x, idx } => {
                if let Some(g) = self.acc(*x) {
                    for (r, &src) in idx.iter().enumerate() {
                        g[src] += gout[r];
                    }
                }
            }
            Op::GroupNormalize { x, groups, sums } => {
                if self.requires_grad(*x) {
                    let xv = self.value(*x).data().to_vec();
                    let g = self.acc(*x).unwrap();
                    for (&(s, l), &sum) in groups.iter().zip(sums) {
                        let dot = (s..s + l).map(|j| gout[j] * xv[j]).sum::<F>();
                        for j in s..s + l {
                            g[j] += gout[j] / sum - dot / (sum * sum);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let d = self.value(*x).last_dim();
                let w = self.nodes[i].value.last_dim();
                let start = *start;
                if let Some(g) = self.acc(*x) {
                    for (r, row) in gout.chunks(w.max(1)).enumerate() {
                        add_into(&mut g[r * d + start..r * d + start + w], row);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(g) = self.acc(p) {
                        for (r, row) in g.chunks_mut(w.max(1)).enumerate() {
                            add_into(row, &gout[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::Outer { a, b } => {
                let av = self.value(*a).data().to_vec();
                let bv = self.value(*b).data().to_vec();
                let nb = bv.len();
                if let Some(g) = self.acc(*a) {
                    for (r, ga) in g.iter_mut().enumerate() {
                        *ga += (0..nb).map(|j| gout[r * nb + j] * bv[j]).sum::<F>();
                    }
                }
                if let Some(g) = self.acc(*b) {
                    for (r, &x) in av.iter().enumerate() {
                        for j in 0..nb {
                            g[j] += gout[r * nb + j] * x;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = self.acc(*x) {
                    add_into(g, gout);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(g) = self.acc(*x) {
                    for a in 0..r {
                        for b in 0..c {
                            g[a * c + b] += gout[b * r + a];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, layout, probs, gout);
                if let Some(g) = self.acc(*q) {
                    add_into(g, &dq);
                }
                if let Some(g) = self.acc(*k) {
                    add_into(g, &dk);
                }
                if let Some(g) = self.acc(*v) {
                    add_into(g, &dv);
                }
            }
            Op::Custom { inputs, op: custom } => {
                let grad_out =
                    Tensor::from_vec(self.nodes[i].value.shape(), gout.to_vec()).expect("grad");
                let grads = {
                    let vals: Vec<&Tensor<F>> = inputs.iter().map(|&v| self.value(v)).collect();
                    custom.backward(&vals, &self.nodes[i].value, &grad_out)
                };
                for (&inp, gi) in inputs.iter().zip(grads) {
                    if let (Some(gi), Some(g)) = (gi, self.acc(inp)) {
                        add_into(g, gi.data());
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[F],
        gout: &[F],
    ) -> (Vec<F>, Vec<F>, Vec<F>) {
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let d = self.value(q).last_dim();
        let dh = d / layout.heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut dq = vec![F::zero(); qd.len()];
        let mut dk = vec![F::zero(); kd.len()];
        let mut dv = vec![F::zero(); vd.len()];
        let mut dp = Vec::new();
        let mut base = 0;
        for s in &layout.segments {
            for h in 0..layout.heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let p = &probs[base..base + s.k_len];
                    base += s.k_len;
                    let orow = (s.q_start + i) * d + c0;
                    let go = &gout[orow..orow + dh];
                    dp.clear();
                    let mut dot = F::zero();
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = (s.k_start + j) * d + c0;
                        if pj == F::zero() {
                            dp.push(F::zero());
                            continue;
                        }
                        let mut acc = F::zero();
                        for c in 0..dh {
                            dv[vrow + c] += pj * go[c];
                            acc += go[c] * vd[vrow + c];
                        }
                        dp.push(acc);
                        dot += pj * acc;
                    }
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == F::zero() {
                            continue;
                        }
                        let ds = pj * (dp[j] - dot) * scale;
                        let krow = (s.k_start + j) * d + c0;
                        for c in 0..dh {
                            dq[orow + c] += ds * kd[krow + c];
                            dk[krow + c] += ds * qd[orow + c];
                        }
                    }
                }
            }
        }
        (dq, dk, dv)
    }

    /// Nodes from which `root` is reachable through recorded inputs.
    pub fn ancestors(&self, root: Var) -> HashSet<Var> {
        let mut seen = HashSet::new();
        let mut stack = vec![root];
        while let Some(v) = stack.pop() {
            if seen.insert(v) {
                stack.extend(self.nodes[v.0].op.inputs());
            }
        }
        seen
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}
