use rand::Rng;

use super::kernels::{self, gemm, Segment};
use super::tensor::{numel, Tensor};
use crate::error::{bail, Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Reduce {
        x: Var,
        kind: Reduce,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRows { mask: Vec<bool>, a: Var, b: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize { x: Var, norms: Vec<f64> },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<Segment>,
        probs: Vec<f64>,
    },
    Dropout { x: Var, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Tape of operations. Nodes are appended in evaluation order, so index
/// order is a topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

fn is_scalar(shape: &[usize]) -> bool {
    numel(shape) == 1
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph that never records gradients, for inference.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf, taking ownership of the tensor (and any gradient it
    /// already holds).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad() && !self.no_grad;
        let grad = t.grad().map(<[f64]>::to_vec);
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            value: t.into_data(),
            op: Op::Leaf,
            requires_grad,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a trainable copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut t = Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor");
        t.set_requires_grad(true);
        self.leaf(t)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, data)?))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Snapshot of a node as a tensor, including its gradient.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid");
        t.set_requires_grad(n.requires_grad);
        t.set_grad(n.grad.clone()).expect("grad shape matches");
        t
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => bail!(Dimension, "{what} expects a matrix, got shape {s:?}"),
        }
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (kb, n) = if b_t { (bc, br) } else { (br, bc) };
        if k != kb {
            bail!(Dimension, "matmul inner dimensions {k} and {kb} differ");
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), b_t, &mut out, 0.0);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, b_t }, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a), &[a]))
    }

    // ----- elementwise ----------------------------------------------------

    fn binary_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb || is_scalar(sb) {
            Ok(sa.to_vec())
        } else if is_scalar(sa) {
            Ok(sb.to_vec())
        } else {
            bail!(Dimension, "{what}: shapes {sa:?} and {sb:?} are not compatible")
        }
    }

    fn zip_values(&self, a: Var, b: Var, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (va, vb) = (self.value(a), self.value(b));
        (0..n)
            .map(|i| {
                let x = if va.len() == 1 { va[0] } else { va[i] };
                let y = if vb.len() == 1 { vb[0] } else { vb[i] };
                f(x, y)
            })
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape(a, b, "add")?;
        let v = self.zip_values(a, b, numel(&shape), |x, y| x + y);
        Ok(self.push(shape, v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape(a, b, "sub")?;
        let v = self.zip_values(a, b, numel(&shape), |x, y| x - y);
        Ok(self.push(shape, v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape(a, b, "mul")?;
        let v = self.zip_values(a, b, numel(&shape), |x, y| x * y);
        Ok(self.push(shape, v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shape(a, b, "div")?;
        if self.value(b).contains(&0.0) {
            bail!(NumericDomain, "division by zero");
        }
        let v = self.zip_values(a, b, numel(&shape), |x, y| x / y);
        Ok(self.push(shape, v, Op::Div(a, b), &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let shape = self.shape(a).to_vec();
        let v = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(shape, v, op, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= 0.0) {
            bail!(NumericDomain, "log of a non-positive value");
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Adds a length-`n` bias to every row of an `m x n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "add_row")?;
        if numel(self.shape(bias)) != n {
            bail!(Dimension, "bias of {} values for {n} columns", numel(self.shape(bias)));
        }
        let mut v = self.value(a).to_vec();
        let b = self.value(bias);
        for row in v.chunks_exact_mut(n) {
            add_into(row, b);
        }
        Ok(self.push(vec![m, n], v, Op::AddRow(a, bias), &[a, bias]))
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            bail!(Input, "dropout rate {rate} outside [0, 1)");
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, v, Op::Dropout { x, mask }, &[x]))
    }

    // ----- shape ----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(a)) || shape.contains(&0) {
            bail!(Dimension, "cannot reshape {:?} to {shape:?}", self.shape(a));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape, v, Op::Reshape(a), &[a]))
    }

    /// Reduces over `axis`, or over everything when `axis` is `None`.
    pub fn reduce(&mut self, x: Var, kind: Reduce, axis: Option<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner, out_shape) = match axis {
            None => (1, numel(&shape), 1, Vec::new()),
            Some(ax) if ax < shape.len() => {
                let outer = shape[..ax].iter().product();
                let inner = shape[ax + 1..].iter().product();
                let mut out_shape = shape.clone();
                out_shape.remove(ax);
                (outer, shape[ax], inner, out_shape)
            }
            Some(ax) => bail!(Dimension, "axis {ax} out of range for shape {shape:?}"),
        };
        let src = self.value(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == Reduce::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| src[(o * len + l) * inner + i];
                let slot = o * inner + i;
                out[slot] = match kind {
                    Reduce::Sum => (0..len).map(at).sum(),
                    Reduce::Mean => (0..len).map(at).sum::<f64>() / len as f64,
                    Reduce::Max => {
                        let mut best = 0;
                        for l in 1..len {
                            if at(l) > at(best) {
                                best = l;
                            }
                        }
                        argmax[slot] = best;
                        at(best)
                    }
                };
            }
        }
        Ok(self.push(
            out_shape,
            out,
            Op::Reduce {
                x,
                kind,
                outer,
                len,
                inner,
                argmax,
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, Reduce::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, Reduce::Mean, axis)
    }

    pub fn max(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, Reduce::Max, axis)
    }

    /// Row-wise `-log softmax(logits)[target]` for an `m x n` matrix; returns
    /// a length-`m` vector of losses.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "cross_entropy_rows")?;
        if targets.len() != m {
            bail!(Dimension, "{} targets for {m} rows", targets.len());
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= n) {
            bail!(Input, "target index {t} out of range for {n} columns");
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; m * n];
        let mut out = Vec::with_capacity(m);
        for (i, &t) in targets.iter().enumerate() {
            let row = &src[i * n..(i + 1) * n];
            let lse = kernels::softmax_row(row, &mut probs[i * n..(i + 1) * n]);
            out.push(lse - row[t]);
        }
        let targets = targets.to_vec();
        Ok(self.push(
            vec![m],
            out,
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        ))
    }

    /// `-log softmax(logits)[positive]` for a single logit vector, as a scalar.
    pub fn softmax_cross_entropy_row(&mut self, logits: Var, positive: usize) -> Result<Var> {
        let n = numel(self.shape(logits));
        let row = self.reshape(logits, vec![1, n])?;
        let loss = self.cross_entropy_rows(row, &[positive])?;
        self.reshape(loss, Vec::new())
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            bail!(Input, "token id {bad} outside vocabulary of {vocab}");
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids }, &[table]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            bail!(Dimension, "row {bad} out of range for {r} rows");
        }
        if idx.is_empty() {
            bail!(Dimension, "gather of zero rows");
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let idx = idx.to_vec();
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { x, idx }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of nothing");
        };
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                bail!(Dimension, "concat_rows: {pc} columns vs {c}");
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat of nothing");
        };
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                bail!(Dimension, "concat_cols: {pr} rows vs {r}");
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Row `i` comes from `a` where `mask[i]`, otherwise from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "select_rows")?;
        if self.shape(b) != [r, c] || mask.len() != r {
            bail!(Dimension, "select_rows: mismatched shapes or mask");
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * c);
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { va } else { vb };
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let mask = mask.to_vec();
        Ok(self.push(vec![r, c], out, Op::SelectRows { mask, a, b }, &[a, b]))
    }

    // ----- fused layers ---------------------------------------------------

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if numel(self.shape(gain)) != n || numel(self.shape(bias)) != n {
            bail!(Dimension, "layer_norm parameters must have {n} values");
        }
        let src = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "l2_normalize_rows")?;
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::with_capacity(m);
        for row in out.chunks_exact_mut(n) {
            let norm = kernels::dot(row, row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                bail!(NumericDomain, "cannot normalize a row with norm {norm}");
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.push(vec![m, n], out, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Multi-head self-attention over `q`, `k`, `v` (all `T x d`), where rows
    /// only attend within their segment.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[Segment],
    ) -> Result<Var> {
        let (t, d) = self.dims2(q, "attention")?;
        if self.shape(k) != [t, d] || self.shape(v) != [t, d] {
            bail!(Dimension, "attention inputs must share shape {t}x{d}");
        }
        if heads == 0 || d % heads != 0 {
            bail!(Dimension, "{d} columns do not split into {heads} heads");
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if covered != t || segments.iter().any(|s| s.start + s.len > t || s.len == 0) {
            bail!(Dimension, "segments do not tile {t} rows");
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            d,
            heads,
            segments,
        );
        Ok(self.push(
            vec![t, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            &[q, k, v],
        ))
    }

    // ----- backward -------------------------------------------------------

    /// Propagates d(loss)/d(node) to every reachable leaf that requires
    /// gradients, adding into any gradient already stored there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => add_into(acc, &g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, &contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        // Gradient for an operand that may have been broadcast from a scalar.
        let reduce_to = |v: Var, full: Vec<f64>| -> Vec<f64> {
            if self.nodes[v.0].value.len() == 1 && full.len() != 1 {
                vec![full.iter().sum()]
            } else {
                full
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let at = |xs: &[f64], j: usize| if xs.len() == 1 { xs[0] } else { xs[j] };

        match &node.op {
            Op::Leaf => unreachable!(),
            &Op::MatMul { a, b, b_t } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = node.shape[1];
                if self.nodes[a.0].requires_grad {
                    // dA = dC · Bᵀ (or dC · B when b is stored transposed)
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(b), !b_t, &mut da, 0.0);
                    send(a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    if b_t {
                        // b stored n x k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, val(a), false, &mut db, 0.0);
                    } else {
                        gemm(k, m, n, val(a), true, g, false, &mut db, 0.0);
                    }
                    send(b, db);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (node.shape[1], node.shape[0]);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] = g[j * r + i];
                    }
                }
                send(a, da);
            }
            &Op::Add(a, b) => {
                send(a, reduce_to(a, g.to_vec()));
                send(b, reduce_to(b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                send(a, reduce_to(a, g.to_vec()));
                send(b, reduce_to(b, g.iter().map(|x| -x).collect()));
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                let ga = g.iter().enumerate().map(|(j, x)| x * at(vb, j)).collect();
                let gb = g.iter().enumerate().map(|(j, x)| x * at(va, j)).collect();
                send(a, reduce_to(a, ga));
                send(b, reduce_to(b, gb));
            }
            &Op::Div(a, b) => {
                let (va, vb) = (val(a), val(b));
                let ga = g.iter().enumerate().map(|(j, x)| x / at(vb, j)).collect();
                let gb = g
                    .iter()
                    .enumerate()
                    .map(|(j, x)| -x * at(va, j) / (at(vb, j) * at(vb, j)))
                    .collect();
                send(a, reduce_to(a, ga));
                send(b, reduce_to(b, gb));
            }
            &Op::Exp(a) => {
                let ga = g.iter().zip(&node.value).map(|(x, y)| x * y).collect();
                send(a, ga);
            }
            &Op::Log(a) => {
                let ga = g.iter().zip(val(a)).map(|(x, y)| x / y).collect();
                send(a, ga);
            }
            &Op::Tanh(a) => {
                let ga = g.iter().zip(&node.value).map(|(x, y)| x * (1.0 - y * y)).collect();
                send(a, ga);
            }
            &Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(val(a))
                    .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                    .collect();
                send(a, ga);
            }
            &Op::Gelu(a) => {
                let ga = g.iter().zip(val(a)).map(|(x, y)| x * kernels::gelu_grad(*y)).collect();
                send(a, ga);
            }
            &Op::Scale(a, c) => send(a, g.iter().map(|x| x * c).collect()),
            &Op::AddRow(a, bias) => {
                let n = node.shape[1];
                if self.nodes[bias.0].requires_grad {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        add_into(&mut gb, row);
                    }
                    send(bias, gb);
                }
                send(a, g.to_vec());
            }
            Op::Dropout { x, mask } => {
                send(*x, g.iter().zip(mask).map(|(a, m)| a * m).collect());
            }
            &Op::Reshape(a) => send(a, g.to_vec()),
            Op::Reduce {
                x,
                kind,
                outer,
                len,
                inner,
                argmax,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        match kind {
                            Reduce::Sum | Reduce::Mean => {
                                let d = if *kind == Reduce::Mean {
                                    g[slot] / len as f64
                                } else {
                                    g[slot]
                                };
                                for l in 0..len {
                                    gx[(o * len + l) * inner + i] = d;
                                }
                            }
                            Reduce::Max => {
                                gx[(o * len + argmax[slot]) * inner + i] = g[slot];
                            }
                        }
                    }
                }
                send(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = self.nodes[logits.0].shape[1];
                let mut gl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * n + t] -= 1.0;
                    gl[i * n..(i + 1) * n].iter_mut().for_each(|v| *v *= g[i]);
                }
                send(*logits, gl);
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                let mut gt = vec![0.0; self.nodes[table.0].value.len()];
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
                send(*table, gt);
            }
            Op::GatherRows { x, idx } => {
                let c = node.shape[1];
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                }
                send(*x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    send(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut col = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    let mut gp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        gp.extend_from_slice(&g[i * total + col..i * total + col + w]);
                    }
                    send(p, gp);
                    col += w;
                }
            }
            Op::SelectRows { mask, a, b } => {
                let c = node.shape[1];
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for (i, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut ga } else { &mut gb };
                    dst[i * c..(i + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.shape[1];
                let gv = val(*gain);
                let mut gg = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                let mut gx = vec![0.0; g.len()];
                for (i, &r) in rstd.iter().enumerate() {
                    let dy = &g[i * n..(i + 1) * n];
                    let h = &xhat[i * n..(i + 1) * n];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        gg[j] += dy[j] * h[j];
                        gbias[j] += dy[j];
                        let dxh = dy[j] * gv[j];
                        mean_d += dxh;
                        mean_dh += dxh * h[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        let dxh = dy[j] * gv[j];
                        gx[i * n + j] = r * (dxh - mean_d - h[j] * mean_dh);
                    }
                }
                send(*x, gx);
                send(*gain, gg);
                send(*bias, gbias);
            }
            Op::L2Normalize { x, norms } => {
                let n = node.shape[1];
                let mut gx = vec![0.0; g.len()];
                for (i, &norm) in norms.iter().enumerate() {
                    let y = &node.value[i * n..(i + 1) * n];
                    let dy = &g[i * n..(i + 1) * n];
                    let proj = kernels::dot(y, dy);
                    for j in 0..n {
                        gx[i * n + j] = (dy[j] - y[j] * proj) / norm;
                    }
                }
                send(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => {
                let d = node.shape[1];
                let (dq, dk, dv) = kernels::attention_backward(
                    val(*q),
                    val(*k),
                    val(*v),
                    probs,
                    g,
                    d,
                    *heads,
                    segments,
                );
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
        }
    }
}
