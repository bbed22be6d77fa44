use indexmap::IndexMap;

use super::params::ParameterSet;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Recorded operation. Variants carry whatever the backward rule needs
/// beyond the forward output.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    MatMul(Var, Var),
    Transpose(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    ScatterMeanRows {
        parts: Vec<Var>,
        starts: Vec<usize>,
        coverage: Vec<usize>,
    },
    MeanRows(Var),
    TopKMeanRows {
        x: Var,
        picks: Vec<Vec<usize>>,
    },
    Sum(Var),
    CosineRows {
        a: Var,
        b: Var,
        a_norm: Vec<f64>,
        b_norm: Vec<f64>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in execution order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    bindings: IndexMap<String, Var>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable input that is not owned by a parameter set.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter as a differentiable leaf. Repeated calls with
    /// the same name return the same handle, so a parameter used in several
    /// places accumulates a single gradient.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(&var) = self.bindings.get(name) {
            return Ok(var);
        }
        let value = params.value(name)?.clone();
        let var = self.push(value, Op::Leaf, true);
        self.bindings.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn bindings(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bindings.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub(crate) fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.to_vec());
                if self.requires_grad(*row) {
                    let cols = self.value(*row).len();
                    let mut gr = vec![0.0; cols];
                    for chunk in g.chunks(cols) {
                        for (acc, v) in gr.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::ScaleRows(x, factors) => {
                let cols = out.cols();
                let gx = g
                    .chunks(cols)
                    .zip(factors)
                    .flat_map(|(chunk, f)| chunk.iter().map(move |v| v * f))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul(a, b) => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let (m, k) = (at.rows(), at.cols());
                let n = bt.cols();
                if self.requires_grad(*a) {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    let bd = bt.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    let ad = at.data();
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (acc, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *acc += a_ip * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.rows(), out.cols());
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = super::ops::axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let gr = &g[span.clone()];
                        let xr = &xhat[span.clone()];
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = s * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.requires_grad(*gain) {
                    let mut gg = vec![0.0; d];
                    for (chunk, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += chunk[j] * xr[j];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
                if self.requires_grad(*bias) {
                    let mut gb = vec![0.0; d];
                    for chunk in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += chunk[j];
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &x)| g * super::ops::gelu_derivative(x))
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = g.iter().zip(xv).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let mut gx = vec![0.0; src.len()];
                let off = start * src.cols();
                gx[off..off + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (rows, cols, width) = (src.rows(), src.cols(), out.cols());
                let mut gx = vec![0.0; src.len()];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, rows } => {
                let src = self.value(*x);
                let cols = src.cols();
                let mut gx = vec![0.0; src.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..cols {
                        gx[r * cols + j] += g[i * cols + j];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for part in parts {
                    let n = self.value(*part).len();
                    self.accumulate(grads, *part, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut col = 0;
                for part in parts {
                    let width = self.value(*part).cols();
                    if self.requires_grad(*part) {
                        let mut gp = Vec::with_capacity(rows * width);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + col..r * total + col + width]);
                        }
                        self.accumulate(grads, *part, gp);
                    }
                    col += width;
                }
            }
            Op::ScatterMeanRows {
                parts,
                starts,
                coverage,
            } => {
                let cols = out.cols();
                for (part, &start) in parts.iter().zip(starts) {
                    if !self.requires_grad(*part) {
                        continue;
                    }
                    let rows = self.value(*part).rows();
                    let mut gp = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let frame = start + r;
                        let inv = 1.0 / coverage[frame] as f64;
                        for j in 0..cols {
                            gp[r * cols + j] = g[frame * cols + j] * inv;
                        }
                    }
                    self.accumulate(grads, *part, gp);
                }
            }
            Op::MeanRows(x) => {
                let src = self.value(*x);
                let rows = src.rows();
                let inv = 1.0 / rows as f64;
                let gx = (0..rows).flat_map(|_| g.iter().map(|v| v * inv)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::TopKMeanRows { x, picks } => {
                let src = self.value(*x);
                let cols = src.cols();
                let mut gx = vec![0.0; src.len()];
                for (c, rows) in picks.iter().enumerate() {
                    let inv = 1.0 / rows.len() as f64;
                    for &r in rows {
                        gx[r * cols + c] += g[c] * inv;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::CosineRows { a, b, a_norm, b_norm } => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let d = at.cols();
                let (ra, rb) = (at.rows_flat(), bt.rows_flat());
                let sims = out.data();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; at.len()];
                    for i in 0..ra {
                        let ai = &at.data()[i * d..(i + 1) * d];
                        for k in 0..rb {
                            let gik = g[i * rb + k];
                            if gik == 0.0 {
                                continue;
                            }
                            let bk = &bt.data()[k * d..(k + 1) * d];
                            let s = sims[i * rb + k];
                            let inv_a = 1.0 / a_norm[i];
                            let inv_b = 1.0 / b_norm[k];
                            for j in 0..d {
                                // ∂s/∂a = (b̂ − s·â) / ‖a‖
                                ga[i * d + j] += gik * (bk[j] * inv_b - s * ai[j] * inv_a) * inv_a;
                            }
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; bt.len()];
                    for k in 0..rb {
                        let bk = &bt.data()[k * d..(k + 1) * d];
                        for i in 0..ra {
                            let gik = g[i * rb + k];
                            if gik == 0.0 {
                                continue;
                            }
                            let ai = &at.data()[i * d..(i + 1) * d];
                            let s = sims[i * rb + k];
                            let inv_a = 1.0 / a_norm[i];
                            let inv_b = 1.0 / b_norm[k];
                            for j in 0..d {
                                gb[k * d + j] += gik * (ai[j] * inv_a - s * bk[j] * inv_b) * inv_b;
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = out.data();
                let d = out.cols();
                let mut gx = vec![0.0; y.len()];
                for (r, n) in norms.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let yr = &y[span.clone()];
                    let gr = &g[span];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::CrossEntropy { logits, target, probs } => {
                let gx = probs
                    .iter()
                    .enumerate()
                    .map(|(k, p)| g[0] * (p - if k == *target { 1.0 } else { 0.0 }))
                    .collect();
                self.accumulate(grads, *logits, gx);
            }
        }
    }
}

impl Tensor {
    /// Number of rows when the last axis is treated as the row width.
    pub(crate) fn rows_flat(&self) -> usize {
        self.len() / self.cols().max(1)
    }
}
