use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::Result;

/// Ordered `(name, tensor)` listing of trainable tensors.
pub trait Module {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("parameter buffer matches its shape").requires_grad_()
}

/// Gaussian init with standard deviation `std`.
pub(crate) fn gaussian<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("finite std");
    param(shape, (0..n).map(|_| normal.sample(rng)).collect())
}

pub(crate) fn constant(shape: &[usize], value: f64) -> Tensor {
    param(shape, vec![value; shape.iter().product()])
}

/// `x W + b` over rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Self {
            w: gaussian(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt(), rng),
            b: constant(&[fan_out], 0.0),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: constant(&[fan_in, fan_out], 0.0),
            b: constant(&[fan_out], 0.0),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w)?.add_row(&self.b)?)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "w"), self.w.clone()));
        out.push((join(prefix, "b"), self.b.clone()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "w"), &mut self.w));
        out.push((join(prefix, "b"), &mut self.b));
    }
}

/// Layer normalization with a learned gain and bias.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

pub const NORM_EPS: f64 = 1e-5;

impl Norm {
    pub fn new(width: usize) -> Self {
        Self {
            gain: constant(&[width], 1.0),
            bias: constant(&[width], 0.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.layer_norm(NORM_EPS)?.mul_row(&self.gain)?.add_row(&self.bias)?)
    }
}

impl Module for Norm {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((join(prefix, "gain"), self.gain.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((join(prefix, "gain"), &mut self.gain));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

/// Pre-norm transformer block: multi-head self-attention then a GELU MLP,
/// each added back onto the residual stream.
#[derive(Debug, Clone)]
pub struct Block {
    pub heads: usize,
    pub norm1: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(width: usize, heads: usize, ff: usize, rng: &mut R) -> Self {
        Self {
            heads,
            norm1: Norm::new(width),
            q: Linear::new(width, width, rng),
            k: Linear::new(width, width, rng),
            v: Linear::new(width, width, rng),
            proj: Linear::new(width, width, rng),
            norm2: Norm::new(width),
            ff1: Linear::new(width, ff, rng),
            ff2: Linear::new(ff, width, rng),
        }
    }

    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let (q, k, v) = (self.q.forward(&h)?, self.k.forward(&h)?, self.v.forward(&h)?);
        let width = x.last_dim();
        let dh = width / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = q.narrow(1, head * dh, dh)?;
            let kh = k.narrow(1, head * dh, dh)?;
            let vh = v.narrow(1, head * dh, dh)?;
            let att = qh.matmul(&kh.transpose()?)?.softmax((dh as f64).sqrt(), None)?;
            outs.push(att.matmul(&vh)?);
        }
        self.proj.forward(&Tensor::concat(&outs, 1)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.attention(x)?)?;
        let f = self.ff2.forward(&self.ff1.forward(&self.norm2.forward(&x)?)?.gelu()?)?;
        Ok(x.add(&f)?)
    }
}

impl Module for Block {
    fn visit(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.q.visit(&join(prefix, "q"), out);
        self.k.visit(&join(prefix, "k"), out);
        self.v.visit(&join(prefix, "v"), out);
        self.proj.visit(&join(prefix, "proj"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.ff1.visit(&join(prefix, "ff1"), out);
        self.ff2.visit(&join(prefix, "ff2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.norm1.visit_mut(&join(prefix, "norm1"), out);
        self.q.visit_mut(&join(prefix, "q"), out);
        self.k.visit_mut(&join(prefix, "k"), out);
        self.v.visit_mut(&join(prefix, "v"), out);
        self.proj.visit_mut(&join(prefix, "proj"), out);
        self.norm2.visit_mut(&join(prefix, "norm2"), out);
        self.ff1.visit_mut(&join(prefix, "ff1"), out);
        self.ff2.visit_mut(&join(prefix, "ff2"), out);
    }
}

/// Fixed sinusoidal table over `(temporal block, spatial index)`: the first
/// half of the channels encodes the block, the second half the position.
pub fn sinusoidal_positions(blocks: usize, spatial: usize, width: usize) -> Tensor {
    let half = width / 2;
    let mut data = Vec::with_capacity(blocks * spatial * width);
    let encode = |pos: f64, c: usize, span: usize| {
        let pair = (c / 2) as f64;
        let freq = 1.0 / 100f64.powf(2.0 * pair / span.max(1) as f64);
        if c.is_multiple_of(2) {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    };
    for t in 0..blocks {
        for s in 0..spatial {
            for c in 0..width {
                data.push(if c < half {
                    encode(t as f64, c, half)
                } else {
                    encode(s as f64, c - half, width - half)
                });
            }
        }
    }
    Tensor::new(&[blocks * spatial, width], data).expect("table matches its shape")
}
