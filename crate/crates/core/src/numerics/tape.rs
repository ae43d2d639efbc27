//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation pushes its
//! output after its inputs, so the node order is already a topological order
//! and [`Graph::backward`] simply walks it in reverse.

use super::tensor::{dot, gemm_nt, gemm_tn, Tensor};
use crate::error::{CilError, Result};

const LN_EPS: f64 = 1e-6;
const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    MeanAxis { x: Var, axis: usize },
    MeanTokens { x: Var, stride: usize, keep: usize },
    Concat { parts: Vec<Var>, axis: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Transpose(Var),
    Sum(Var),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Attention { qkv: Var, batch: usize, tokens: usize, heads: usize, probs: Vec<f64> },
    AppendPrompts { x: Var, prompts: Var, batch: usize, tokens: usize },
    ReplacePrompts { h: Var, prompts: Var, batch: usize, tokens: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape: values of every intermediate plus how each was produced.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when it was not reached.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    match t.rank() {
        1 => (1, t.shape()[0]),
        _ => (t.shape()[0], t.shape()[1]),
    }
}

fn shape2(r: usize, c: usize) -> Vec<usize> {
    vec![r, c]
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn check_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.rank() != 2 {
            return Err(CilError::dim(op, t.shape(), &[0, 0]));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(CilError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shapes checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(
        &mut self,
        op: &'static str,
        x: Var,
        r: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (tx, tr) = (self.value(x), self.value(r));
        let c = tx.cols();
        if tr.numel() != c || tx.rank() == 0 {
            return Err(CilError::dim(op, tx.shape(), tr.shape()));
        }
        let rv = tr.data();
        let data = tx
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(rv).map(|(&a, &b)| f(a, b)))
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// `x[m×n] + r[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, r, |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, r), &[x, r]))
    }

    /// `x[m×n] ⊙ r[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, r: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, r, |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, r), &[x, r]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.check_2d("layer_norm", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; rows * cols];
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &src[i * cols..(i + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(shape2(rows, cols), out)?;
        Ok(self.push(out, Op::LayerNorm { x, inv_std }, &[x]))
    }

    /// Scales each row to unit Euclidean norm. A zero row is a degenerate input.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = mat_dims(t);
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for row in out.chunks_mut(cols) {
            let n = dot(row, row).sqrt();
            if n < NORM_EPS {
                return Err(CilError::Degenerate("l2_normalize of a zero row".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, &[x]))
    }

    /// Mean of a matrix over `axis` (0 = down columns, 1 = across rows).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (rows, cols) = self.check_2d("mean_axis", x)?;
        let d = self.value(x).data();
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; cols];
                for row in d.chunks(cols) {
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                acc.iter_mut().for_each(|a| *a /= rows as f64);
                Tensor::new(shape2(1, cols), acc)?
            }
            1 => {
                let acc = d.chunks(cols).map(|r| r.iter().sum::<f64>() / cols as f64).collect();
                Tensor::new(shape2(rows, 1), acc)?
            }
            _ => return Err(CilError::dim("mean_axis", &[rows, cols], &[axis])),
        };
        Ok(self.push(out, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Treats `x` as consecutive groups of `stride` rows and averages the
    /// first `keep` rows of each group. Used to pool token sequences while
    /// skipping trailing prompt slots.
    pub fn mean_tokens(&mut self, x: Var, stride: usize, keep: usize) -> Result<Var> {
        let (rows, cols) = self.check_2d("mean_tokens", x)?;
        if stride == 0 || keep == 0 || keep > stride || rows % stride != 0 {
            return Err(CilError::dim("mean_tokens", &[rows, cols], &[stride, keep]));
        }
        let groups = rows / stride;
        let d = self.value(x).data();
        let mut out = vec![0.0; groups * cols];
        for g in 0..groups {
            let o = &mut out[g * cols..(g + 1) * cols];
            for t in 0..keep {
                let r = &d[(g * stride + t) * cols..(g * stride + t + 1) * cols];
                o.iter_mut().zip(r).for_each(|(a, v)| *a += v);
            }
            o.iter_mut().for_each(|a| *a /= keep as f64);
        }
        let out = Tensor::new(shape2(groups, cols), out)?;
        Ok(self.push(out, Op::MeanTokens { x, stride, keep }, &[x]))
    }

    /// Concatenates matrices along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| CilError::contract("concat of zero tensors"))?;
        let (r0, c0) = self.check_2d("concat", first)?;
        for &p in &parts[1..] {
            let (r, c) = self.check_2d("concat", p)?;
            if (axis == 0 && c != c0) || (axis == 1 && r != r0) || axis > 1 {
                return Err(CilError::dim("concat", &[r0, c0], &[r, c]));
            }
        }
        let out = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
                rows += self.value(p).rows();
            }
            Tensor::new(shape2(rows, c0), data)?
        } else {
            let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
            let mut data = Vec::with_capacity(r0 * total);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(shape2(r0, total), data)?
        };
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Gathers the given rows; unselected rows receive exactly zero gradient.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.check_2d("select_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(CilError::dim("select_rows", &[n, cols], &[bad]));
        }
        let t = self.value(x);
        let data = rows.iter().flat_map(|&r| t.row(r).iter().copied()).collect();
        let out = Tensor::new(shape2(rows.len(), cols), data)?;
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.check_2d("softmax_rows", x)?;
        let mut out = self.value(x).data().to_vec();
        out.chunks_mut(cols).for_each(softmax_in_place);
        let out = Tensor::new(shape2(rows, cols), out)?;
        Ok(self.push(out, Op::SoftmaxRows(x), &[x]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.check_2d("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(CilError::dim("cross_entropy", &[rows, cols], &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(CilError::contract(format!(
                "cross_entropy target {t} outside {cols} classes"
            )));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(cols).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let out = Tensor::scalar(loss / rows as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` holds `batch·tokens` rows laid out as `[q | k | v]`, each of
    /// width `d`; output is `batch·tokens × d` with heads concatenated.
    pub fn attention(&mut self, qkv: Var, batch: usize, tokens: usize, heads: usize) -> Result<Var> {
        let (rows, cols) = self.check_2d("attention", qkv)?;
        if rows != batch * tokens || cols % 3 != 0 || (cols / 3) % heads.max(1) != 0 || heads == 0 {
            return Err(CilError::dim("attention", &[rows, cols], &[batch, tokens, heads]));
        }
        let d = cols / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; batch * heads * tokens * tokens];
        let mut scores = vec![0.0; tokens];
        for b in 0..batch {
            for h in 0..heads {
                let p_base = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let qi = &src[(b * tokens + i) * cols + h * dh..][..dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &src[(b * tokens + j) * cols + d + h * dh..][..dh];
                        *s = dot(qi, kj) * scale;
                    }
                    softmax_in_place(&mut scores);
                    probs[p_base + i * tokens..p_base + (i + 1) * tokens].copy_from_slice(&scores);
                    let oi = &mut out[(b * tokens + i) * d + h * dh..][..dh];
                    for (j, &a) in scores.iter().enumerate() {
                        let vj = &src[(b * tokens + j) * cols + 2 * d + h * dh..][..dh];
                        oi.iter_mut().zip(vj).for_each(|(o, v)| *o += a * v);
                    }
                }
            }
        }
        let out = Tensor::new(shape2(rows, d), out)?;
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                probs,
            },
            &[qkv],
        ))
    }

    /// Appends the prompt rows `prompts[n×d]` after each sample's `tokens`
    /// rows: `[x_b, P]` for every sample `b`.
    pub fn append_prompts(&mut self, x: Var, prompts: Var, batch: usize, tokens: usize) -> Result<Var> {
        let (rows, d) = self.check_2d("append_prompts", x)?;
        let (n, dp) = self.check_2d("append_prompts", prompts)?;
        if dp != d || rows != batch * tokens {
            return Err(CilError::dim("append_prompts", &[rows, d], &[n, dp]));
        }
        let (tx, tp) = (self.value(x).data(), self.value(prompts).data());
        let mut data = Vec::with_capacity(batch * (tokens + n) * d);
        for b in 0..batch {
            data.extend_from_slice(&tx[b * tokens * d..(b + 1) * tokens * d]);
            data.extend_from_slice(tp);
        }
        let out = Tensor::new(shape2(batch * (tokens + n), d), data)?;
        Ok(self.push(
            out,
            Op::AppendPrompts {
                x,
                prompts,
                batch,
                tokens,
            },
            &[x, prompts],
        ))
    }

    /// Overwrites the trailing prompt slots of every sample in `h` with `prompts`.
    pub fn replace_prompts(&mut self, h: Var, prompts: Var, batch: usize, tokens: usize) -> Result<Var> {
        let (rows, d) = self.check_2d("replace_prompts", h)?;
        let (n, dp) = self.check_2d("replace_prompts", prompts)?;
        if dp != d || rows != batch * (tokens + n) {
            return Err(CilError::dim("replace_prompts", &[rows, d], &[n, dp]));
        }
        let mut data = self.value(h).data().to_vec();
        let tp = self.value(prompts).data();
        let stride = tokens + n;
        for b in 0..batch {
            data[(b * stride + tokens) * d..(b + 1) * stride * d].copy_from_slice(tp);
        }
        let out = Tensor::new(shape2(rows, d), data)?;
        Ok(self.push(
            out,
            Op::ReplacePrompts {
                h,
                prompts,
                batch,
                tokens,
            },
            &[h, prompts],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(CilError::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            // Interior gradients are not kept; only leaves are exposed.
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = mat_dims(ta);
                let n = tb.cols();
                if self.requires_grad(*a) {
                    let ga = gemm_nt(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                }
                if self.requires_grad(*b) {
                    let gb = gemm_tn(ta.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), d)?);
                }
            }
            Op::AddRow(x, r) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*r) {
                    let c = g.cols();
                    let mut acc = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    let shape = self.shape(*r).to_vec();
                    self.accumulate(grads, *r, Tensor::new(shape, acc)?);
                }
            }
            Op::MulRow(x, r) => {
                let (tx, tr) = (self.value(*x), self.value(*r));
                let c = tx.cols();
                if self.requires_grad(*x) {
                    let d = g
                        .data()
                        .chunks(c)
                        .flat_map(|row| row.iter().zip(tr.data()).map(|(a, b)| a * b))
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
                }
                if self.requires_grad(*r) {
                    let mut acc = vec![0.0; c];
                    for (grow, xrow) in g.data().chunks(c).zip(tx.data().chunks(c)) {
                        for j in 0..c {
                            acc[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accumulate(grads, *r, Tensor::new(tr.shape().to_vec(), acc)?);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = out.cols();
                let mut d = vec![0.0; out.numel()];
                for (i, is) in inv_std.iter().enumerate() {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let mg = gy.iter().sum::<f64>() / c as f64;
                    let mgy = dot(gy, y) / c as f64;
                    for j in 0..c {
                        d[i * c + j] = is * (gy[j] - mg - y[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = out.cols();
                let mut d = vec![0.0; out.numel()];
                for (i, n) in norms.iter().enumerate() {
                    let y = &out.data()[i * c..(i + 1) * c];
                    let gy = &g.data()[i * c..(i + 1) * c];
                    let proj = dot(y, gy);
                    for j in 0..c {
                        d[i * c + j] = (gy[j] - y[j] * proj) / n;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::MeanAxis { x, axis } => {
                let tx = self.value(*x);
                let (rows, cols) = (tx.shape()[0], tx.shape()[1]);
                let mut d = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        d[i * cols + j] = if *axis == 0 {
                            g.data()[j] / rows as f64
                        } else {
                            g.data()[i] / cols as f64
                        };
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
            }
            Op::MeanTokens { x, stride, keep } => {
                let tx = self.value(*x);
                let cols = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for (gi, grow) in g.data().chunks(cols).enumerate() {
                    for t in 0..*keep {
                        let r = gi * stride + t;
                        for j in 0..cols {
                            d[r * cols + j] = grow[j] / *keep as f64;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).numel();
                        let d = g.data()[offset..offset + n].to_vec();
                        offset += n;
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                } else {
                    let total = g.cols();
                    let mut col = 0;
                    for &p in parts {
                        let (r, c) = mat_dims(self.value(p));
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g.data()[i * total + col..i * total + col + c]);
                        }
                        col += c;
                        self.accumulate(grads, p, Tensor::new(self.shape(p).to_vec(), d)?);
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g.data()[k * c + j];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()?),
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::filled(self.shape(*x), gv));
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                let mut d = vec![0.0; out.numel()];
                for i in 0..out.rows() {
                    let y = out.row(i);
                    let gy = g.row(i);
                    let s = dot(y, gy);
                    for j in 0..c {
                        d[i * c + j] = y[j] * (gy[j] - s);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape().to_vec(), d)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0] / targets.len() as f64;
                let c = self.value(*logits).cols();
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), d)?);
            }
            Op::Attention {
                qkv,
                batch,
                tokens,
                heads,
                probs,
            } => {
                let d = self.accumulate_attention(*qkv, g, *batch, *tokens, *heads, probs);
                self.accumulate(grads, *qkv, Tensor::new(self.shape(*qkv).to_vec(), d)?);
            }
            Op::AppendPrompts {
                x,
                prompts,
                batch,
                tokens,
            } => {
                let d = g.cols();
                let n = self.value(*prompts).rows();
                let stride = tokens + n;
                let mut gx = Vec::with_capacity(batch * tokens * d);
                let mut gp = vec![0.0; n * d];
                for b in 0..*batch {
                    gx.extend_from_slice(&g.data()[b * stride * d..(b * stride + tokens) * d]);
                    let slot = &g.data()[(b * stride + tokens) * d..(b + 1) * stride * d];
                    gp.iter_mut().zip(slot).for_each(|(a, v)| *a += v);
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x).to_vec(), gx)?);
                self.accumulate(grads, *prompts, Tensor::new(self.shape(*prompts).to_vec(), gp)?);
            }
            Op::ReplacePrompts {
                h,
                prompts,
                batch,
                tokens,
            } => {
                let d = g.cols();
                let n = self.value(*prompts).rows();
                let stride = tokens + n;
                let mut gh = g.data().to_vec();
                let mut gp = vec![0.0; n * d];
                for b in 0..*batch {
                    let slot = &mut gh[(b * stride + tokens) * d..(b + 1) * stride * d];
                    gp.iter_mut().zip(slot.iter()).for_each(|(a, v)| *a += v);
                    slot.iter_mut().for_each(|v| *v = 0.0);
                }
                self.accumulate(grads, *h, Tensor::new(self.shape(*h).to_vec(), gh)?);
                self.accumulate(grads, *prompts, Tensor::new(self.shape(*prompts).to_vec(), gp)?);
            }
        }
        Ok(())
    }

    fn accumulate_attention(
        &self,
        qkv: Var,
        g: &Tensor,
        batch: usize,
        tokens: usize,
        heads: usize,
        probs: &[f64],
    ) -> Vec<f64> {
        let src = self.value(qkv).data();
        let cols = self.value(qkv).cols();
        let d = cols / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let go = g.data();
        let mut dq = vec![0.0; src.len()];
        let mut da = vec![0.0; tokens];
        for b in 0..batch {
            for h in 0..heads {
                let p_base = (b * heads + h) * tokens * tokens;
                for i in 0..tokens {
                    let a = &probs[p_base + i * tokens..p_base + (i + 1) * tokens];
                    let goi = &go[(b * tokens + i) * d + h * dh..][..dh];
                    // dV_j += a_ij · dO_i ;  dA_ij = dO_i · V_j
                    for j in 0..tokens {
                        let vj_off = (b * tokens + j) * cols + 2 * d + h * dh;
                        da[j] = dot(goi, &src[vj_off..vj_off + dh]);
                        for t in 0..dh {
                            dq[vj_off + t] += a[j] * goi[t];
                        }
                    }
                    let s: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
                    let q_off = (b * tokens + i) * cols + h * dh;
                    for j in 0..tokens {
                        let ds = a[j] * (da[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let k_off = (b * tokens + j) * cols + d + h * dh;
                        for t in 0..dh {
                            dq[q_off + t] += ds * src[k_off + t];
                            dq[k_off + t] += ds * src[q_off + t];
                        }
                    }
                }
            }
        }
        dq
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
