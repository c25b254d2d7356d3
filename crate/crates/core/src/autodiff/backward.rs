//! Reverse-mode accumulation over the recorded graph.

use std::collections::{HashMap, HashSet};

use super::fft::{self, ComplexSeries};
use super::ops::{cosine_parts, gelu_grad, matmul_kernel, row_stats, transpose_kernel};
use super::tensor::{Op, Result, Tensor};
use super::TensorError;

/// Gradients of a scalar root with respect to the leaves it depends on.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    leaves: HashMap<u64, Vec<f64>>,
}

impl Gradients {
    /// Gradient for `t`, or `None` when no path from the root reaches it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.leaves.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient for `t`, zero-filled when unreached.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

/// Nodes reachable from `root` through grad-requiring edges, parents first.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut seen = HashSet::new();
    // (node, children pushed?)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !seen.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(op) = node.op() {
            for p in op.parents().into_iter().rev() {
                if p.requires_grad() && !seen.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

fn accumulate(grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, g: Vec<f64>) {
    if !t.requires_grad() {
        return;
    }
    match grads.get_mut(&t.id()) {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => {
            grads.insert(t.id(), g);
        }
    }
}

/// Gradient for a broadcast operand: summed when the operand was a scalar.
fn reduce_for(t: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if t.is_scalar() && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn value_at(t: &Tensor, i: usize) -> f64 {
    if t.is_scalar() {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

impl Tensor {
    /// Back-propagates from this scalar through every recorded operation.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: self.shape().to_vec(),
            });
        }
        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        let mut leaves = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { leaves });
        }
        grads.insert(self.id(), vec![1.0]);
        for node in topo_order(self).into_iter().rev() {
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            match node.op() {
                None => {
                    leaves.insert(node.id(), g);
                }
                Some(op) => propagate(&node, op, &g, &mut grads),
            }
        }
        Ok(Gradients { leaves })
    }
}

fn propagate(out: &Tensor, op: &Op, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
    let y = out.data();
    match op {
        Op::Add(a, b) => {
            if a.requires_grad() {
                accumulate(grads, a, reduce_for(a, g.to_vec()));
            }
            if b.requires_grad() {
                accumulate(grads, b, reduce_for(b, g.to_vec()));
            }
        }
        Op::Sub(a, b) => {
            if a.requires_grad() {
                accumulate(grads, a, reduce_for(a, g.to_vec()));
            }
            if b.requires_grad() {
                accumulate(grads, b, reduce_for(b, g.iter().map(|v| -v).collect()));
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let ga = g.iter().enumerate().map(|(i, gi)| gi * value_at(b, i)).collect();
                accumulate(grads, a, reduce_for(a, ga));
            }
            if b.requires_grad() {
                let gb = g.iter().enumerate().map(|(i, gi)| gi * value_at(a, i)).collect();
                accumulate(grads, b, reduce_for(b, gb));
            }
        }
        Op::Div(a, b) => {
            if a.requires_grad() {
                let ga = g.iter().enumerate().map(|(i, gi)| gi / value_at(b, i)).collect();
                accumulate(grads, a, reduce_for(a, ga));
            }
            if b.requires_grad() {
                let gb = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let bv = value_at(b, i);
                        -gi * value_at(a, i) / (bv * bv)
                    })
                    .collect();
                accumulate(grads, b, reduce_for(b, gb));
            }
        }
        Op::AddScalar(a) => accumulate(grads, a, g.to_vec()),
        Op::Scale(a, c) => accumulate(grads, a, g.iter().map(|v| v * c).collect()),
        Op::Neg(a) => accumulate(grads, a, g.iter().map(|v| -v).collect()),
        Op::Abs(a) => {
            // Subgradient 0 at the kink.
            let ga = g
                .iter()
                .zip(a.data())
                .map(|(gi, &x)| if x > 0.0 { *gi } else if x < 0.0 { -gi } else { 0.0 })
                .collect();
            accumulate(grads, a, ga);
        }
        Op::Relu(a) => {
            let ga = g
                .iter()
                .zip(a.data())
                .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(grads, a, ga);
        }
        Op::Exp(a) => accumulate(grads, a, g.iter().zip(y).map(|(gi, yi)| gi * yi).collect()),
        Op::Tanh(a) => accumulate(
            grads,
            a,
            g.iter().zip(y).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect(),
        ),
        Op::Gelu(a) => accumulate(
            grads,
            a,
            g.iter().zip(a.data()).map(|(gi, &x)| gi * gelu_grad(x)).collect(),
        ),
        Op::Square(a) => accumulate(
            grads,
            a,
            g.iter().zip(a.data()).map(|(gi, x)| 2.0 * gi * x).collect(),
        ),
        Op::Sqrt(a) => accumulate(
            grads,
            a,
            g.iter()
                .zip(y)
                .map(|(gi, yi)| if *yi > 0.0 { gi / (2.0 * yi) } else { 0.0 })
                .collect(),
        ),
        Op::Huber(a, delta) => accumulate(
            grads,
            a,
            g.iter()
                .zip(a.data())
                .map(|(gi, &r)| gi * if r.abs() <= *delta { r } else { delta * r.signum() })
                .collect(),
        ),
        Op::MatMul(a, b) => {
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            if a.requires_grad() {
                let bt = transpose_kernel(b.data(), k, n);
                accumulate(grads, a, matmul_kernel(g, &bt, m, n, k));
            }
            if b.requires_grad() {
                let at = transpose_kernel(a.data(), m, k);
                accumulate(grads, b, matmul_kernel(&at, g, k, m, n));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (a.shape()[0], a.shape()[1]);
            accumulate(grads, a, transpose_kernel(g, c, r));
        }
        Op::Sum(a, axis) | Op::Mean(a, axis) => {
            let is_mean = matches!(op, Op::Mean(..));
            let ga = match axis {
                None => {
                    let v = if is_mean { g[0] / a.numel() as f64 } else { g[0] };
                    vec![v; a.numel()]
                }
                Some(ax) => {
                    let shape = a.shape();
                    let outer: usize = shape[..*ax].iter().product();
                    let mid = shape[*ax];
                    let inner: usize = shape[ax + 1..].iter().product();
                    let div = if is_mean { mid as f64 } else { 1.0 };
                    let mut ga = vec![0.0; a.numel()];
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                ga[(o * mid + m) * inner + i] = g[o * inner + i] / div;
                            }
                        }
                    }
                    ga
                }
            };
            accumulate(grads, a, ga);
        }
        Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
        Op::Narrow { input, axis, start } => {
            let shape = input.shape();
            let outer: usize = shape[..*axis].iter().product();
            let mid = shape[*axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let len = out.shape()[*axis];
            let mut ga = vec![0.0; input.numel()];
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * mid + start) * inner;
                ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(grads, input, ga);
        }
        Op::GatherRows { input, rows } => {
            let width = input.numel() / input.shape()[0].max(1);
            let mut ga = vec![0.0; input.numel()];
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..width {
                    ga[r * width + j] += g[i * width + j];
                }
            }
            accumulate(grads, input, ga);
        }
        Op::Concat { inputs, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut offset = 0;
            for t in inputs {
                let chunk = t.shape()[*axis] * inner;
                if t.requires_grad() {
                    let mut gt = Vec::with_capacity(t.numel());
                    for o in 0..outer {
                        let base = o * total + offset;
                        gt.extend_from_slice(&g[base..base + chunk]);
                    }
                    accumulate(grads, t, gt);
                }
                offset += chunk;
            }
        }
        Op::AddRow(a, row) => {
            if a.requires_grad() {
                accumulate(grads, a, g.to_vec());
            }
            if row.requires_grad() {
                let n = row.numel();
                let mut gr = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    gr[i % n] += gi;
                }
                accumulate(grads, row, gr);
            }
        }
        Op::MulRow(a, row) => {
            let n = row.numel();
            if a.requires_grad() {
                let ga = g.iter().enumerate().map(|(i, gi)| gi * row.data()[i % n]).collect();
                accumulate(grads, a, ga);
            }
            if row.requires_grad() {
                let mut gr = vec![0.0; n];
                for (i, gi) in g.iter().enumerate() {
                    gr[i % n] += gi * a.data()[i];
                }
                accumulate(grads, row, gr);
            }
        }
        Op::Softmax {
            input,
            scale,
            clipped,
        } => {
            let width = input.last_dim();
            let mut ga = vec![0.0; input.numel()];
            for r in 0..input.numel() / width {
                let base = r * width;
                let dot: f64 = (0..width).map(|j| g[base + j] * y[base + j]).sum();
                for j in 0..width {
                    if !clipped[base + j] {
                        ga[base + j] = scale * y[base + j] * (g[base + j] - dot);
                    }
                }
            }
            accumulate(grads, input, ga);
        }
        Op::LayerNorm { input, eps } => {
            let width = input.last_dim();
            let n = width as f64;
            let mut ga = vec![0.0; input.numel()];
            for (r, row) in input.data().chunks(width).enumerate() {
                let base = r * width;
                let (_, rstd) = row_stats(row, *eps);
                let gy = &g[base..base + width];
                let yr = &y[base..base + width];
                let mean_g = gy.iter().sum::<f64>() / n;
                let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                for j in 0..width {
                    ga[base + j] = rstd * (gy[j] - mean_g - yr[j] * mean_gy);
                }
            }
            accumulate(grads, input, ga);
        }
        Op::RowCosine(a, b) => {
            let d = a.shape()[1];
            let mut ga = vec![0.0; a.numel()];
            let mut gb = vec![0.0; b.numel()];
            for (i, gi) in g.iter().enumerate() {
                let ar = &a.data()[i * d..(i + 1) * d];
                let br = &b.data()[i * d..(i + 1) * d];
                let (cos, na, nb) = cosine_parts(ar, br);
                if na == 0.0 || nb == 0.0 {
                    continue;
                }
                for j in 0..d {
                    ga[i * d + j] = gi * (br[j] / (na * nb) - cos * ar[j] / (na * na));
                    gb[i * d + j] = gi * (ar[j] / (na * nb) - cos * br[j] / (nb * nb));
                }
            }
            if a.requires_grad() {
                accumulate(grads, a, ga);
            }
            if b.requires_grad() {
                accumulate(grads, b, gb);
            }
        }
        Op::TemporalDft { input, blocks } => {
            // d/dx_t of sum_k gRe_k Re_k + gIm_k Im_k is t-th entry of
            // n * Re(idft(gRe + i gIm)).
            let (rows, d) = (input.shape()[0], input.shape()[1]);
            let s = rows / blocks;
            let mut ga = vec![0.0; input.numel()];
            for tok in 0..s {
                for c in 0..d {
                    let re = (0..*blocks).map(|k| g[(k * s + tok) * d + c]).collect();
                    let im = (0..*blocks).map(|k| g[(rows + k * s + tok) * d + c]).collect();
                    let back = fft::idft(&ComplexSeries::new(re, im));
                    for t in 0..*blocks {
                        ga[(t * s + tok) * d + c] = back.real[t] * *blocks as f64;
                    }
                }
            }
            accumulate(grads, input, ga);
        }
        Op::CrossEntropy { logits, labels } => {
            let c = logits.shape()[1];
            let n = labels.len() as f64;
            let mut ga = vec![0.0; logits.numel()];
            for (r, row) in logits.data().chunks(c).enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                for j in 0..c {
                    let p = (row[j] - max).exp() / denom;
                    let target = if j == labels[r] { 1.0 } else { 0.0 };
                    ga[r * c + j] = g[0] * (p - target) / n;
                }
            }
            accumulate(grads, logits, ga);
        }
    }
}
