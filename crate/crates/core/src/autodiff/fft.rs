//! Discrete Fourier transforms over short temporal fibers.
//!
//! Power-of-two lengths use an iterative radix-2 Cooley-Tukey transform;
//! every other length falls back to the direct O(n^2) sum.

use std::f64::consts::PI;

use super::tensor::{Result, Tensor};
use super::TensorError;

/// Complex coefficients of one transformed fiber.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSeries {
    pub real: Vec<f64>,
    pub imag: Vec<f64>,
}

impl ComplexSeries {
    pub fn new(real: Vec<f64>, imag: Vec<f64>) -> Self {
        assert_eq!(real.len(), imag.len(), "real and imaginary parts must match");
        Self { real, imag }
    }

    pub fn len(&self) -> usize {
        self.real.len()
    }

    pub fn is_empty(&self) -> bool {
        self.real.is_empty()
    }
}

fn bit_reverse_permute(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
}

/// In-place radix-2 transform; `sign` is -1 for forward, +1 for inverse
/// (unnormalized).
fn radix2(re: &mut [f64], im: &mut [f64], sign: f64) {
    let n = re.len();
    debug_assert!(n.is_power_of_two());
    bit_reverse_permute(re, im);
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let (ws, wc) = (ang * k as f64).sin_cos();
                let (a, b) = (start + k, start + k + len / 2);
                let tr = re[b] * wc - im[b] * ws;
                let ti = re[b] * ws + im[b] * wc;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
            }
        }
        len <<= 1;
    }
}

fn direct(re: &[f64], im: &[f64], sign: f64) -> ComplexSeries {
    let n = re.len();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        for t in 0..n {
            // Reduce k*t mod n first so the angle stays small and exact.
            let ang = sign * 2.0 * PI * ((k * t) % n) as f64 / n as f64;
            let (s, c) = ang.sin_cos();
            out_re[k] += re[t] * c - im[t] * s;
            out_im[k] += re[t] * s + im[t] * c;
        }
    }
    ComplexSeries::new(out_re, out_im)
}

fn transform(re: &[f64], im: &[f64], sign: f64) -> ComplexSeries {
    if re.len().is_power_of_two() {
        let (mut r, mut i) = (re.to_vec(), im.to_vec());
        radix2(&mut r, &mut i, sign);
        ComplexSeries::new(r, i)
    } else {
        direct(re, im, sign)
    }
}

/// Forward transform `X_k = sum_t x_t exp(-2 pi i k t / n)` of a real fiber.
pub fn dft_real(x: &[f64]) -> ComplexSeries {
    transform(x, &vec![0.0; x.len()], -1.0)
}

/// Forward transform of a complex fiber.
pub fn dft(x: &ComplexSeries) -> ComplexSeries {
    transform(&x.real, &x.imag, -1.0)
}

/// Inverse transform, normalized by `1/n`.
pub fn idft(x: &ComplexSeries) -> ComplexSeries {
    let mut out = transform(&x.real, &x.imag, 1.0);
    let n = x.len() as f64;
    out.real.iter_mut().for_each(|v| *v /= n);
    out.imag.iter_mut().for_each(|v| *v /= n);
    out
}

/// Transforms every fiber along axis 0 of `x`. Fibers come back in
/// row-major order of the remaining axes.
pub fn fft_time(x: &Tensor) -> Result<Vec<ComplexSeries>> {
    let t = *x.shape().first().ok_or(TensorError::Rank {
        expected: 1,
        shape: Vec::new(),
    })?;
    if t < 2 {
        return Err(TensorError::InvalidArgument("temporal extent must be at least 2"));
    }
    let fibers = x.numel() / t;
    let d = x.data();
    Ok((0..fibers)
        .map(|f| {
            let fiber: Vec<f64> = (0..t).map(|i| d[i * fibers + f]).collect();
            dft_real(&fiber)
        })
        .collect())
}

/// Inverse of [`fft_time`]: rebuilds the real `[t, ...]` layout from the
/// fibers, discarding any imaginary residue.
pub fn ifft_time(fibers: &[ComplexSeries], shape: &[usize]) -> Result<Tensor> {
    let t = shape.first().copied().unwrap_or(0);
    let n_fibers = fibers.len();
    if t * n_fibers != shape.iter().product::<usize>() || fibers.iter().any(|f| f.len() != t) {
        return Err(TensorError::InvalidArgument("spectrum does not match the requested shape"));
    }
    let mut data = vec![0.0; t * n_fibers];
    for (f, series) in fibers.iter().enumerate() {
        let back = idft(series);
        for i in 0..t {
            data[i * n_fibers + f] = back.real[i];
        }
    }
    Tensor::new(shape, data)
}
