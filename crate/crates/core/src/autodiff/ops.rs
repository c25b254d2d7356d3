//! Forward kernels. Every public method returns a new tensor and, when an
//! input requires a gradient, records how it was made.

use super::fft;
use super::tensor::{numel, Op, Result, Tensor};
use super::TensorError;

/// Element-wise arithmetic selector for [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Abs,
    Neg,
}

/// Applies `kind` to `a` (and `b` for binary kinds). Unary kinds ignore `b`.
pub fn elementwise(kind: ElementwiseOp, a: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let rhs = || b.ok_or(TensorError::MissingOperand);
    match kind {
        ElementwiseOp::Add => a.add(rhs()?),
        ElementwiseOp::Sub => a.sub(rhs()?),
        ElementwiseOp::Mul => a.mul(rhs()?),
        ElementwiseOp::Div => a.div(rhs()?),
        ElementwiseOp::Abs => a.abs(),
        ElementwiseOp::Neg => a.neg(),
    }
}

/// Reduction selector for [`reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

pub fn reduce(kind: ReduceOp, a: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match kind {
        ReduceOp::Sum => a.sum(axis),
        ReduceOp::Mean => a.mean(axis),
    }
}

/// Splits `shape` around `axis` into (outer, extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.is_scalar() {
        Ok(a.shape().to_vec())
    } else if a.is_scalar() {
        Ok(b.shape().to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (ad, bd) = (a.data(), b.data());
    let ai = |i: usize| if a.is_scalar() { ad[0] } else { ad[i] };
    let bi = |i: usize| if b.is_scalar() { bd[0] } else { bd[i] };
    (0..n).map(|i| f(ai(i), bi(i))).collect()
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Vec<f64> {
    a.data().iter().map(|&x| f(x)).collect()
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Piecewise Huber penalty.
pub fn huber_value(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape(self, other)?;
        let data = zip_broadcast(self, other, numel(&shape), |x, y| x + y);
        Tensor::from_op(shape, data, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape(self, other)?;
        let data = zip_broadcast(self, other, numel(&shape), |x, y| x - y);
        Tensor::from_op(shape, data, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape(self, other)?;
        let data = zip_broadcast(self, other, numel(&shape), |x, y| x * y);
        Tensor::from_op(shape, data, Op::Mul(self.clone(), other.clone()))
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        let shape = broadcast_shape(self, other)?;
        if other.data().contains(&0.0) {
            return Err(TensorError::DivisionByZero);
        }
        let data = zip_broadcast(self, other, numel(&shape), |x, y| x / y);
        Tensor::from_op(shape, data, Op::Div(self.clone(), other.clone()))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        Tensor::from_op(self.shape().to_vec(), map(self, |x| x + c), Op::AddScalar(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        Tensor::from_op(self.shape().to_vec(), map(self, |x| x * c), Op::Scale(self.clone(), c))
    }

    pub fn neg(&self) -> Result<Tensor> {
        Tensor::from_op(self.shape().to_vec(), map(self, |x| -x), Op::Neg(self.clone()))
    }

    pub fn abs(&self) -> Result<Tensor> {
        Tensor::from_op(self.shape().to_vec(), map(self, f64::abs), Op::Abs(self.clone()))
    }

    pub fn relu(&self) -> Result<Tensor> {
        Tensor::from_op(self.shape().to_vec(), map(self, |x| x.max(0.0)), Op::Relu(self.clone()))
    }

    pub fn exp(&self) -> Result<Tensor> {
        Tensor::from_op(self.shape().to_vec(), map(self, f64::exp), Op::Exp(self.clone()))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        Tensor::from_op(self.shape().to_vec(), map(self, f64::tanh), Op::Tanh(self.clone()))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Result<Tensor> {
        Tensor::from_op(self.shape().to_vec(), map(self, gelu), Op::Gelu(self.clone()))
    }

    pub fn square(&self) -> Result<Tensor> {
        Tensor::from_op(self.shape().to_vec(), map(self, |x| x * x), Op::Square(self.clone()))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if self.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain { op: "sqrt" });
        }
        Tensor::from_op(self.shape().to_vec(), map(self, f64::sqrt), Op::Sqrt(self.clone()))
    }

    /// Element-wise Huber penalty with knee at `delta`.
    pub fn huber(&self, delta: f64) -> Result<Tensor> {
        if !(delta > 0.0) {
            return Err(TensorError::InvalidArgument("huber delta must be positive"));
        }
        Tensor::from_op(
            self.shape().to_vec(),
            map(self, |r| huber_value(r, delta)),
            Op::Huber(self.clone(), delta),
        )
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let out = matmul_kernel(self.data(), other.data(), m, k, n);
        Tensor::from_op(vec![m, n], out, Op::MatMul(self.clone(), other.clone()))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let out = transpose_kernel(self.data(), r, c);
        Tensor::from_op(vec![c, r], out, Op::Transpose(self.clone()))
    }

    fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            Err(TensorError::Axis {
                axis,
                shape: self.shape().to_vec(),
            })
        } else {
            Ok(())
        }
    }

    fn sum_raw(&self, axis: Option<usize>) -> Result<(Vec<usize>, Vec<f64>)> {
        match axis {
            None => Ok((Vec::new(), vec![self.data().iter().sum()])),
            Some(ax) => {
                self.check_axis(ax)?;
                let (outer, mid, inner) = split_axis(self.shape(), ax);
                let mut out = vec![0.0; outer * inner];
                let d = self.data();
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += d[base + i];
                        }
                    }
                }
                let mut shape = self.shape().to_vec();
                shape.remove(ax);
                Ok((shape, out))
            }
        }
    }

    /// Sum over `axis`, or over everything when `axis` is `None`.
    pub fn sum(&self, axis: Option<usize>) -> Result<Tensor> {
        let (shape, data) = self.sum_raw(axis)?;
        Tensor::from_op(shape, data, Op::Sum(self.clone(), axis))
    }

    pub fn mean(&self, axis: Option<usize>) -> Result<Tensor> {
        let (shape, mut data) = self.sum_raw(axis)?;
        let extent = match axis {
            None => self.numel(),
            Some(ax) => self.shape()[ax],
        };
        if extent == 0 {
            return Err(TensorError::Empty);
        }
        data.iter_mut().for_each(|v| *v /= extent as f64);
        Tensor::from_op(shape, data, Op::Mean(self.clone(), axis))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                len: self.numel(),
            });
        }
        Tensor::from_op(shape.to_vec(), self.to_vec(), Op::Reshape(self.clone()))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let (outer, mid, inner) = split_axis(self.shape(), axis);
        if start + len > mid {
            return Err(TensorError::Range {
                start,
                len,
                extent: mid,
            });
        }
        let d = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(
            shape,
            out,
            Op::Narrow {
                input: self.clone(),
                axis,
                start,
            },
        )
    }

    /// Picks rows (axis 0) in the given order; repeats are allowed.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 {
            return Err(TensorError::Rank {
                expected: 1,
                shape: Vec::new(),
            });
        }
        let n = self.shape()[0];
        let width = self.numel() / n.max(1);
        let d = self.data();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Range {
                    start: r,
                    len: 1,
                    extent: n,
                });
            }
            out.extend_from_slice(&d[r * width..(r + 1) * width]);
        }
        let mut shape = self.shape().to_vec();
        shape[0] = rows.len();
        Tensor::from_op(
            shape,
            out,
            Op::GatherRows {
                input: self.clone(),
                rows: rows.to_vec(),
            },
        )
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(inputs: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = inputs.first().ok_or(TensorError::Empty)?;
        first.check_axis(axis)?;
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for t in inputs {
            let compatible = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for t in inputs {
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        Tensor::from_op(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        )
    }

    fn check_row(&self, row: &Tensor) -> Result<()> {
        if row.rank() != 1 || row.numel() != self.last_dim() || self.rank() == 0 {
            return Err(TensorError::ShapeMismatch {
                lhs: self.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Adds a `[n]` vector to every trailing `n`-wide row.
    pub fn add_row(&self, row: &Tensor) -> Result<Tensor> {
        self.check_row(row)?;
        let n = row.numel();
        let r = row.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % n])
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::AddRow(self.clone(), row.clone()))
    }

    /// Multiplies every trailing `n`-wide row by a `[n]` vector.
    pub fn mul_row(&self, row: &Tensor) -> Result<Tensor> {
        self.check_row(row)?;
        let n = row.numel();
        let r = row.data();
        let out = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % n])
            .collect();
        Tensor::from_op(self.shape().to_vec(), out, Op::MulRow(self.clone(), row.clone()))
    }

    /// Softmax along the last axis of `self / temperature`, with the scaled
    /// logits clamped into `clip` first when given.
    pub fn softmax(&self, temperature: f64, clip: Option<(f64, f64)>) -> Result<Tensor> {
        if !(temperature > 0.0) {
            return Err(TensorError::InvalidArgument("softmax temperature must be positive"));
        }
        if let Some((lo, hi)) = clip {
            if !(lo < hi) {
                return Err(TensorError::InvalidArgument("softmax clip interval is empty"));
            }
        }
        if self.numel() == 0 {
            return Err(TensorError::Empty);
        }
        let scale = 1.0 / temperature;
        let width = self.last_dim();
        let mut out = vec![0.0; self.numel()];
        let mut clipped = vec![false; self.numel()];
        for (r, row) in self.data().chunks(width).enumerate() {
            let base = r * width;
            let mut logits: Vec<f64> = row.iter().map(|&x| x * scale).collect();
            if let Some((lo, hi)) = clip {
                for (j, l) in logits.iter_mut().enumerate() {
                    if *l < lo || *l > hi {
                        clipped[base + j] = true;
                        *l = l.clamp(lo, hi);
                    }
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, l) in logits.iter().enumerate() {
                let e = (l - max).exp();
                out[base + j] = e;
                denom += e;
            }
            for v in &mut out[base..base + width] {
                *v /= denom;
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::Softmax {
                input: self.clone(),
                scale,
                clipped,
            },
        )
    }

    /// Normalizes every last-axis row to zero mean and unit variance.
    pub fn layer_norm(&self, eps: f64) -> Result<Tensor> {
        let width = self.last_dim();
        let mut out = Vec::with_capacity(self.numel());
        for row in self.data().chunks(width) {
            let (mean, rstd) = row_stats(row, eps);
            out.extend(row.iter().map(|&x| (x - mean) * rstd));
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            Op::LayerNorm {
                input: self.clone(),
                eps,
            },
        )
    }

    /// Cosine similarity of matching rows of two `[n, d]` tensors. Rows with
    /// a zero vector on either side give 0.
    pub fn row_cosine(&self, other: &Tensor) -> Result<Tensor> {
        let (n, d) = self.dims2()?;
        if self.shape() != other.shape() {
            return Err(TensorError::ShapeMismatch {
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let out = (0..n)
            .map(|i| {
                let a = &self.data()[i * d..(i + 1) * d];
                let b = &other.data()[i * d..(i + 1) * d];
                cosine_parts(a, b).0
            })
            .collect();
        Tensor::from_op(vec![n], out, Op::RowCosine(self.clone(), other.clone()))
    }

    /// Discrete Fourier transform along time for a `[blocks * s, d]` tensor
    /// whose rows are ordered time-major. The result stacks the real parts
    /// (first `blocks * s` rows, frequency-major) over the imaginary parts.
    pub fn temporal_dft(&self, blocks: usize) -> Result<Tensor> {
        let (rows, d) = self.dims2()?;
        if blocks < 2 {
            return Err(TensorError::InvalidArgument("temporal extent must be at least 2"));
        }
        if rows % blocks != 0 {
            return Err(TensorError::InvalidArgument("rows are not a multiple of the temporal extent"));
        }
        let s = rows / blocks;
        let mut out = vec![0.0; 2 * rows * d];
        let mut fiber = vec![0.0; blocks];
        for tok in 0..s {
            for c in 0..d {
                for (t, f) in fiber.iter_mut().enumerate() {
                    *f = self.data()[(t * s + tok) * d + c];
                }
                let spec = fft::dft_real(&fiber);
                for k in 0..blocks {
                    out[(k * s + tok) * d + c] = spec.real[k];
                    out[(rows + k * s + tok) * d + c] = spec.imag[k];
                }
            }
        }
        Tensor::from_op(
            vec![2 * rows, d],
            out,
            Op::TemporalDft {
                input: self.clone(),
                blocks,
            },
        )
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, c) = self.dims2()?;
        if labels.len() != n || n == 0 {
            return Err(TensorError::InvalidArgument("label count must match logit rows"));
        }
        if labels.iter().any(|&l| l >= c) {
            return Err(TensorError::InvalidArgument("label out of range"));
        }
        let mut total = 0.0;
        for (row, &label) in self.data().chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[label];
        }
        Tensor::from_op(
            Vec::new(),
            vec![total / n as f64],
            Op::CrossEntropy {
                logits: self.clone(),
                labels: labels.to_vec(),
            },
        )
    }
}

pub(crate) fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// (cosine, |a|, |b|), with cosine 0 when either norm vanishes.
pub(crate) fn cosine_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        (0.0, na, nb)
    } else {
        (dot / (na * nb), na, nb)
    }
}

pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

pub(crate) fn transpose_kernel(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}
