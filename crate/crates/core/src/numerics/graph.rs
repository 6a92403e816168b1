//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node in insertion order. Because
//! inputs always precede their consumers, reverse insertion order is a valid
//! topological order, and [`Graph::backward`] visits each node once.

use std::borrow::Cow;

use super::tensor::{axis_split, matmul_into, transpose_buf};
use super::{NumericsError, Tensor};

/// Lower clamp applied to probabilities inside [`Graph::weighted_bce`].
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as negative controls for the
/// gradient checker.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// LayerNorm backward drops the centering and variance terms.
    LayerNormBackward,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    LogSigmoid(usize),
    Softmax {
        x: usize,
        axis: usize,
    },
    LogSoftmax {
        x: usize,
        axis: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanAxis {
        x: usize,
        axis: usize,
    },
    SumAll(usize),
    MeanAll(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Pick {
        x: usize,
        indices: Vec<usize>,
    },
    SampledLogits {
        h: usize,
        w: usize,
        b: usize,
        ids: Vec<Vec<usize>>,
    },
    WeightedBce {
        p: usize,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Computation graph for one forward/backward pass.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    fault: Option<Fault>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn with_fault(fault: Option<Fault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf borrowing an existing tensor.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// Differentiable leaf owning its value.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumericsError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(NumericsError::Rank {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize, op: &'static str) -> Result<(), NumericsError> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(NumericsError::InvalidAxis { op, axis, rank });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.derived(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul(a.0, b.0),
            &[a.0, b.0],
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix(a, "transpose")?;
        let out = transpose_buf(self.value(a).data(), m, n);
        Ok(self.derived(
            Tensor::from_parts(vec![n, m], out),
            Op::Transpose(a.0),
            &[a.0],
        ))
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.derived(t, Op::Reshape(a.0), &[a.0]))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "add")?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.derived(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "sub")?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.derived(t, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape(a, b, "mul")?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.derived(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a bias vector to every row of a matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix(a, "add_row")?;
        if self.shape(bias) != [n] {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: vec![m, n],
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.derived(
            Tensor::from_parts(vec![m, n], out),
            Op::AddRow(a.0, bias.0),
            &[a.0, bias.0],
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.derived(t, Op::Scale(a.0, c), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v + c);
        self.derived(t, Op::AddScalar(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        self.derived(t, Op::Relu(a.0), &[a.0])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.derived(t, Op::Sigmoid(a.0), &[a.0])
    }

    /// `ln σ(x)`, evaluated without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(log_sigmoid);
        self.derived(t, Op::LogSigmoid(a.0), &[a.0])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        self.check_axis(x, axis, "softmax")?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| out[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[idx(j)] /= sum;
                }
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.derived(
            Tensor::from_parts(shape, out),
            Op::Softmax { x: x.0, axis },
            &[x.0],
        ))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        self.check_axis(x, axis, "log_softmax")?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = v.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len)
                    .map(|j| out[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + (0..len)
                        .map(|j| (out[idx(j)] - max).exp())
                        .sum::<f64>()
                        .ln();
                for j in 0..len {
                    out[idx(j)] -= lse;
                }
            }
        }
        let shape = v.shape().to_vec();
        Ok(self.derived(
            Tensor::from_parts(shape, out),
            Op::LogSoftmax { x: x.0, axis },
            &[x.0],
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let d = *self.shape(x).last().ok_or(NumericsError::Rank {
            op: "layer_norm",
            expected: 1,
            shape: vec![],
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = if d == 0 { 0 } else { xv.len() / d };
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.derived(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            &[x.0, gain.0, bias.0],
        ))
    }

    /// Mean over one axis; the axis is removed from the output shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        self.check_axis(x, axis, "mean_axis")?;
        let v = self.value(x);
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += v.data()[(o * len + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|s| *s /= len as f64);
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.derived(
            Tensor::from_parts(shape, out),
            Op::MeanAxis { x: x.0, axis },
            &[x.0],
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::SumAll(x.0), &[x.0])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.derived(Tensor::scalar(s), Op::MeanAll(x.0), &[x.0])
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix(x, "slice_cols")?;
        if start > end || end > n {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: n,
            });
        }
        let w = end - start;
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(m * w);
        for r in 0..m {
            out.extend_from_slice(&v[r * n + start..r * n + end]);
        }
        Ok(self.derived(
            Tensor::from_parts(vec![m, w], out),
            Op::SliceCols { x: x.0, start },
            &[x.0],
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let m = match parts.first() {
            Some(&p) => self.matrix(p, "concat_cols")?.0,
            None => {
                return Err(NumericsError::Rank {
                    op: "concat_cols",
                    expected: 2,
                    shape: vec![],
                })
            }
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix(p, "concat_cols")?;
            if pm != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.derived(
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatCols(idx.clone()),
            &idx,
        ))
    }

    /// Selects rows of a matrix (rows may repeat).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let (m, n) = self.matrix(x, "gather_rows")?;
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    bound: m,
                });
            }
            out.extend_from_slice(&v[r * n..(r + 1) * n]);
        }
        Ok(self.derived(
            Tensor::from_parts(vec![rows.len(), n], out),
            Op::GatherRows {
                x: x.0,
                rows: rows.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Picks flat (row-major) elements into a vector.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(indices.len());
        for &i in indices {
            out.push(*v.get(i).ok_or(NumericsError::IndexOutOfRange {
                op: "pick",
                index: i,
                bound: v.len(),
            })?);
        }
        Ok(self.derived(
            Tensor::vector(out),
            Op::Pick {
                x: x.0,
                indices: indices.to_vec(),
            },
            &[x.0],
        ))
    }

    /// Logits of a linear layer `h·w + b` evaluated only at the requested
    /// output columns: `out[i][j] = h[i]·w[:, ids[i][j]] + b[ids[i][j]]`.
    pub fn sampled_logits(
        &mut self,
        h: Var,
        w: Var,
        b: Var,
        ids: &[Vec<usize>],
    ) -> Result<Var, NumericsError> {
        let (m, d) = self.matrix(h, "sampled_logits")?;
        let (d2, vocab) = self.matrix(w, "sampled_logits")?;
        if d != d2 || self.shape(b) != [vocab] || ids.len() != m {
            return Err(NumericsError::ShapeMismatch {
                op: "sampled_logits",
                left: vec![m, d],
                right: vec![d2, vocab],
            });
        }
        let c = ids.first().map_or(0, Vec::len);
        let hv = self.value(h).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(m * c);
        for (i, row_ids) in ids.iter().enumerate() {
            if row_ids.len() != c {
                return Err(NumericsError::ShapeMismatch {
                    op: "sampled_logits",
                    left: vec![c],
                    right: vec![row_ids.len()],
                });
            }
            let hr = &hv[i * d..(i + 1) * d];
            for &id in row_ids {
                if id >= vocab {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "sampled_logits",
                        index: id,
                        bound: vocab,
                    });
                }
                let mut s = bv[id];
                for p in 0..d {
                    s += hr[p] * wv[p * vocab + id];
                }
                out.push(s);
            }
        }
        Ok(self.derived(
            Tensor::from_parts(vec![m, c], out),
            Op::SampledLogits {
                h: h.0,
                w: w.0,
                b: b.0,
                ids: ids.to_vec(),
            },
            &[h.0, w.0, b.0],
        ))
    }

    /// `Σ wᵢ·(−tᵢ ln pᵢ − (1−tᵢ) ln(1−pᵢ))` with `p` clamped to
    /// `[PROB_CLAMP, 1 − PROB_CLAMP]`. Returns the loss and the number of
    /// clamped entries.
    pub fn weighted_bce(
        &mut self,
        p: Var,
        targets: &[f64],
        weights: &[f64],
    ) -> Result<(Var, usize), NumericsError> {
        let pv = self.value(p).data();
        if pv.len() != targets.len() || pv.len() != weights.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "weighted_bce",
                left: self.shape(p).to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut clamped = 0;
        let mut loss = 0.0;
        for ((&pi, &t), &w) in pv.iter().zip(targets).zip(weights) {
            let (q, c) = clamp_prob(pi);
            clamped += c as usize;
            loss += w * (-t * q.ln() - (1.0 - t) * (1.0 - q).ln());
        }
        let var = self.derived(
            Tensor::scalar(loss),
            Op::WeightedBce {
                p: p.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            &[p.0],
        );
        Ok((var, clamped))
    }

    /// Reverse pass from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |j: usize| self.nodes[j].value.as_ref();
        let wants = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).rows(), val(a).cols());
                let n = val(b).cols();
                if wants(a) {
                    let bt = transpose_buf(val(b).data(), k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut ga, m, n, k);
                    accumulate(grads, a, &ga);
                }
                if wants(b) {
                    let at = transpose_buf(val(a).data(), m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_into(&at, g, &mut gb, k, m, n);
                    accumulate(grads, b, &gb);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = (val(a).rows(), val(a).cols());
                accumulate(grads, a, &transpose_buf(g, n, m));
            }
            &Op::Reshape(a) => accumulate(grads, a, g),
            &Op::Add(a, b) => {
                accumulate_if(grads, wants(a), a, g);
                accumulate_if(grads, wants(b), b, g);
            }
            &Op::Sub(a, b) => {
                accumulate_if(grads, wants(a), a, g);
                if wants(b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, b, &neg);
                }
            }
            &Op::Mul(a, b) => {
                if wants(a) {
                    let ga: Vec<f64> = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, a, &ga);
                }
                if wants(b) {
                    let gb: Vec<f64> = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, b, &gb);
                }
            }
            &Op::AddRow(a, bias) => {
                accumulate_if(grads, wants(a), a, g);
                if wants(bias) {
                    let n = val(bias).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(grads, bias, &gb);
                }
            }
            &Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                accumulate(grads, a, &ga);
            }
            &Op::AddScalar(a) => accumulate(grads, a, g),
            &Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(a).data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(grads, a, &ga);
            }
            &Op::Sigmoid(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                accumulate(grads, a, &ga);
            }
            &Op::LogSigmoid(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(val(a).data())
                    .map(|(&gv, &x)| gv * sigmoid(-x))
                    .collect();
                accumulate(grads, a, &ga);
            }
            &Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let dot: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, x, &gx);
            }
            &Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + ii;
                        let total: f64 = (0..len).map(|j| g[idx(j)]).sum();
                        for j in 0..len {
                            gx[idx(j)] = g[idx(j)] - out[idx(j)].exp() * total;
                        }
                    }
                }
                accumulate(grads, x, &gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = val(*gain).len();
                let gv = val(*gain).data();
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut gx = vec![0.0; g.len()];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = 0.0;
                    let mut mean_ghh = 0.0;
                    for j in 0..d {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                        let gh = gr[j] * gv[j];
                        mean_gh += gh;
                        mean_ghh += gh * hr[j];
                    }
                    mean_gh /= d as f64;
                    mean_ghh /= d as f64;
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        gx[r * d + j] = match self.fault {
                            Some(Fault::LayerNormBackward) => inv * gh,
                            None => inv * (gh - mean_gh - hr[j] * mean_ghh),
                        };
                    }
                }
                accumulate_if(grads, wants(*x), *x, &gx);
                accumulate_if(grads, wants(*gain), *gain, &ggain);
                accumulate_if(grads, wants(*bias), *bias, &gbias);
            }
            &Op::MeanAxis { x, axis } => {
                let (outer, len, inner) = axis_split(val(x).shape(), axis);
                let mut gx = vec![0.0; val(x).len()];
                for o in 0..outer {
                    for j in 0..len {
                        for ii in 0..inner {
                            gx[(o * len + j) * inner + ii] = g[o * inner + ii] / len as f64;
                        }
                    }
                }
                accumulate(grads, x, &gx);
            }
            &Op::SumAll(x) => {
                let gx = vec![g[0]; val(x).len()];
                accumulate(grads, x, &gx);
            }
            &Op::MeanAll(x) => {
                let n = val(x).len();
                let gx = vec![g[0] / n as f64; n];
                accumulate(grads, x, &gx);
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = (val(x).rows(), val(x).cols());
                let w = node.value.cols();
                let mut gx = vec![0.0; m * n];
                for r in 0..m {
                    gx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                accumulate(grads, x, &gx);
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * n + offset..r * n + offset + w]);
                        }
                        accumulate(grads, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = val(*x).cols();
                let mut gx = vec![0.0; val(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        gx[r * n + j] += g[k * n + j];
                    }
                }
                accumulate(grads, *x, &gx);
            }
            Op::Pick { x, indices } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (k, &idx) in indices.iter().enumerate() {
                    gx[idx] += g[k];
                }
                accumulate(grads, *x, &gx);
            }
            Op::SampledLogits { h, w, b, ids } => {
                let (h, w, b) = (*h, *w, *b);
                let d = val(h).cols();
                let vocab = val(w).cols();
                let hv = val(h).data();
                let wv = val(w).data();
                let c = node.value.cols();
                let mut gh = vec![0.0; hv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; vocab];
                for (i, row_ids) in ids.iter().enumerate() {
                    for (j, &id) in row_ids.iter().enumerate() {
                        let gij = g[i * c + j];
                        gb[id] += gij;
                        for p in 0..d {
                            gh[i * d + p] += gij * wv[p * vocab + id];
                            gw[p * vocab + id] += gij * hv[i * d + p];
                        }
                    }
                }
                accumulate_if(grads, wants(h), h, &gh);
                accumulate_if(grads, wants(w), w, &gw);
                accumulate_if(grads, wants(b), b, &gb);
            }
            Op::WeightedBce {
                p,
                targets,
                weights,
            } => {
                let gp: Vec<f64> = val(*p)
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&pi, &t), &w)| match clamp_prob(pi) {
                        (_, true) => 0.0,
                        (q, false) => g[0] * w * (-t / q + (1.0 - t) / (1.0 - q)),
                    })
                    .collect();
                accumulate(grads, *p, &gp);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(existing) => {
            for (e, &v) in existing.iter_mut().zip(g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_if(grads: &mut [Option<Vec<f64>>], cond: bool, idx: usize, g: &[f64]) {
    if cond {
        accumulate(grads, idx, g);
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
