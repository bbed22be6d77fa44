use super::tape::{Op, Tape, Var};
use super::{Tensor, LAYER_NORM_EPS, NORM_EPS};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// (outer, axis extent, inner) for a reduction along `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::InvalidShape {
            op,
            shape: t.shape().to_vec(),
            reason: format!("expected rank {rank}"),
        });
    }
    Ok(())
}

impl Tape {
    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad(*v))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape as input")
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect()).expect("same shape as input")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a length-`c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).cols();
        if self.value(row).len() != cols || self.value(row).rows_flat() != 1 {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let xv = self.value(x);
        let rv = self.value(row).data();
        let data = xv
            .data()
            .chunks(cols)
            .flat_map(|chunk| chunk.iter().zip(rv).map(|(a, b)| a + b))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.map(x, |v| v * s);
        let rg = self.requires_grad(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Multiplies row `r` of `x` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if factors.len() != xv.rows_flat() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: xv.shape().to_vec(),
                right: vec![factors.len()],
            });
        }
        let data = xv
            .data()
            .chunks(cols)
            .zip(&factors)
            .flat_map(|(chunk, f)| chunk.iter().map(move |v| v * f))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::ScaleRows(x, factors), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        require_rank("matmul", av, 2)?;
        require_rank("matmul", bv, 2)?;
        let (m, k) = (av.rows(), av.cols());
        let n = bv.cols();
        if bv.rows() != k {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += a_ip * b;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_row(h, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        require_rank("transpose", xv, 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::InvalidAxis { axis, rank: xv.rank() });
        }
        let (outer, n, inner) = axis_split(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[idx(j)] /= total;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 || xv.rank() == 0 {
            return Err(Error::InvalidShape {
                op: "layer_norm",
                shape: xv.shape().to_vec(),
                reason: "last axis must have at least 2 entries".into(),
            });
        }
        for p in [gain, bias] {
            if self.value(p).len() != d {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: xv.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows_flat();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, gelu);
        let rg = self.requires_grad(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| v.max(0.0));
        let rg = self.requires_grad(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        require_rank("slice_rows", xv, 2)?;
        if len == 0 || start + len > xv.rows() {
            return Err(Error::InvalidShape {
                op: "slice_rows",
                shape: xv.shape().to_vec(),
                reason: format!("rows {start}..{}", start + len),
            });
        }
        let c = xv.cols();
        let value = Tensor::new(vec![len, c], xv.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        require_rank("slice_cols", xv, 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        if len == 0 || start + len > c {
            return Err(Error::InvalidShape {
                op: "slice_cols",
                shape: xv.shape().to_vec(),
                reason: format!("cols {start}..{}", start + len),
            });
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    /// Rows picked by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(x).select_rows(rows)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    /// Stacks parts vertically; rank-1 parts count as single rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidShape {
                op: "concat_rows",
                shape: vec![],
                reason: "no parts".into(),
            });
        };
        let cols = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols || pv.rank() > 2 {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
            rows += pv.rows_flat();
            data.extend_from_slice(pv.data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidShape {
                op: "concat_cols",
                shape: vec![],
                reason: "no parts".into(),
            });
        };
        let rows = self.value(first).rows();
        for &p in parts {
            let pv = self.value(p);
            require_rank("concat_cols", pv, 2)?;
            if pv.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: pv.shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Places each part at its start row of a `rows`-row matrix and averages
    /// rows covered by several parts. Uncovered rows are zero.
    pub fn scatter_mean_rows(&mut self, parts: &[Var], starts: &[usize], rows: usize) -> Result<Var> {
        if parts.is_empty() || parts.len() != starts.len() {
            return Err(Error::InvalidShape {
                op: "scatter_mean_rows",
                shape: vec![parts.len(), starts.len()],
                reason: "one start per part required".into(),
            });
        }
        let cols = self.value(parts[0]).cols();
        let mut sum = vec![0.0; rows * cols];
        let mut coverage = vec![0usize; rows];
        for (&p, &start) in parts.iter().zip(starts) {
            let pv = self.value(p);
            require_rank("scatter_mean_rows", pv, 2)?;
            if pv.cols() != cols || start + pv.rows() > rows {
                return Err(Error::ShapeMismatch {
                    op: "scatter_mean_rows",
                    left: vec![rows, cols],
                    right: pv.shape().to_vec(),
                });
            }
            for r in 0..pv.rows() {
                coverage[start + r] += 1;
                for (acc, v) in sum[(start + r) * cols..(start + r + 1) * cols]
                    .iter_mut()
                    .zip(pv.row(r))
                {
                    *acc += v;
                }
            }
        }
        for (r, &c) in coverage.iter().enumerate() {
            if c > 1 {
                let inv = 1.0 / c as f64;
                sum[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v *= inv);
            }
        }
        let value = Tensor::new(vec![rows, cols], sum)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            Op::ScatterMeanRows {
                parts: parts.to_vec(),
                starts: starts.to_vec(),
                coverage,
            },
            rg,
        ))
    }

    /// Column means of a matrix, as a vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        require_rank("mean_rows", xv, 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for chunk in xv.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        let value = Tensor::vector(out);
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// Per column, the mean of its `k` largest entries (ties go to the lower
    /// row index).
    pub fn topk_mean_rows(&mut self, x: Var, k: usize) -> Result<Var> {
        let xv = self.value(x);
        require_rank("topk_mean_rows", xv, 2)?;
        let (r, c) = (xv.rows(), xv.cols());
        if k == 0 || k > r {
            return Err(Error::TopKOutOfRange { k, frames: r });
        }
        let mut picks = Vec::with_capacity(c);
        let mut out = Vec::with_capacity(c);
        for col in 0..c {
            let mut order: Vec<usize> = (0..r).collect();
            order.sort_by(|&a, &b| xv.at(b, col).total_cmp(&xv.at(a, col)).then(a.cmp(&b)));
            order.truncate(k);
            out.push(order.iter().map(|&i| xv.at(i, col)).sum::<f64>() / k as f64);
            picks.push(order);
        }
        let value = Tensor::vector(out);
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::TopKMeanRows { x, picks }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let rg = self.requires_grad(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Pairwise cosine similarity between the rows of `a` and the rows of `b`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() || av.rank() > 2 || bv.rank() > 2 {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let d = av.cols();
        let a_norm = row_norms("cosine_similarity", av)?;
        let b_norm = row_norms("cosine_similarity", bv)?;
        let (ra, rb) = (a_norm.len(), b_norm.len());
        let mut out = vec![0.0; ra * rb];
        for i in 0..ra {
            let ai = &av.data()[i * d..(i + 1) * d];
            for k in 0..rb {
                let bk = &bv.data()[k * d..(k + 1) * d];
                let dot: f64 = ai.iter().zip(bk).map(|(x, y)| x * y).sum();
                out[i * rb + k] = dot / (a_norm[i] * b_norm[k]);
            }
        }
        let value = Tensor::new(vec![ra, rb], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::CosineRows { a, b, a_norm, b_norm }, rg))
    }

    /// Cosine similarity of two vectors, as a scalar.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        if self.value(u).rank() != 1 || self.shape(u) != self.shape(v) {
            return Err(Error::ShapeMismatch {
                op: "cosine_similarity",
                left: self.shape(u).to_vec(),
                right: self.shape(v).to_vec(),
            });
        }
        let sims = self.cosine_rows(u, v)?;
        self.reshape(sims, Vec::new())
    }

    /// Scales every row (last axis) to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norms = row_norms("l2_normalize", xv)?;
        let d = xv.cols();
        let data = xv
            .data()
            .chunks(d)
            .zip(&norms)
            .flat_map(|(chunk, n)| chunk.iter().map(move |v| v / n))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// `−log softmax(logits)[target]` in fused log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 1 {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: lv.shape().to_vec(),
                reason: "logits must be a vector".into(),
            });
        }
        let classes = lv.len();
        if target >= classes {
            return Err(Error::TargetOutOfRange { target, classes });
        }
        let z = lv.data();
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + total.ln();
        let probs: Vec<f64> = z.iter().map(|v| (v - log_z).exp()).collect();
        let loss = (log_z - z[target]).max(0.0);
        let rg = self.requires_grad(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target, probs }, rg))
    }
}

fn row_norms(op: &'static str, t: &Tensor) -> Result<Vec<f64>> {
    let d = t.cols();
    t.data()
        .chunks(d)
        .map(|row| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= NORM_EPS {
                Err(Error::DegenerateVector {
                    op,
                    norm,
                    eps: NORM_EPS,
                })
            } else {
                Ok(norm)
            }
        })
        .collect()
}
