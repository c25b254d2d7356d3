//! Central finite-difference verification of analytic gradients.

use super::tensor::{Result, Tensor};
use super::TensorError;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Maximum relative error per input, in input order.
    pub max_rel_error: Vec<f64>,
    pub step: f64,
}

impl GradReport {
    /// Largest relative error over every input.
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }
}

/// Relative error with the denominator floored at 1e-8.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-8)
}

/// Compares the gradient `backward` gives for `f` at `inputs` with central
/// differences of step `step`. `f` must return a single-element tensor.
pub fn grad_check_with_step<F, E>(f: F, inputs: &[Tensor], step: f64) -> std::result::Result<GradReport, E>
where
    F: Fn(&[Tensor]) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().requires_grad_()).collect();
    let root = f(&leaves)?;
    if root.numel() != 1 {
        return Err(TensorError::NonScalarRoot {
            shape: root.shape().to_vec(),
        }
        .into());
    }
    let grads = root.backward()?;

    let mut max_rel_error = Vec::with_capacity(inputs.len());
    for (which, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get_or_zeros(leaf);
        let mut worst: f64 = 0.0;
        for i in 0..leaf.numel() {
            let base = inputs[which].data()[i];
            let (hi, lo) = (base + step, base - step);
            let eval = |value: f64| -> std::result::Result<f64, E> {
                let probe: Vec<Tensor> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == which {
                            let mut d = t.to_vec();
                            d[i] = value;
                            Tensor::new(t.shape(), d)
                        } else {
                            Ok(t.detach())
                        }
                    })
                    .collect::<Result<_>>()?;
                Ok(f(&probe)?.item())
            };
            // Divide by the step actually taken after rounding.
            let numeric = (eval(hi)? - eval(lo)?) / (hi - lo);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
        max_rel_error.push(worst);
    }
    Ok(GradReport {
        max_rel_error,
        step,
    })
}

/// [`grad_check_with_step`] at [`FD_STEP`].
pub fn grad_check<F, E>(f: F, inputs: &[Tensor]) -> std::result::Result<GradReport, E>
where
    F: Fn(&[Tensor]) -> std::result::Result<Tensor, E>,
    E: From<TensorError>,
{
    grad_check_with_step(f, inputs, FD_STEP)
}
