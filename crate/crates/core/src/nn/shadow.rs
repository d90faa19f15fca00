//! 64-bit shadow evaluation of the network, used to validate the 32-bit
//! gradients against finite differences.

use super::{accumulate_gradient, forward_cached, Architecture, DenoiserModel, NnError};
use crate::tensor::Tensor;

fn image_f64(t: &Tensor) -> Result<(usize, usize, Vec<f64>), NnError> {
    let (h, w) = t.image_dims().ok_or_else(|| NnError::NotAnImage(t.shape().to_vec()))?;
    Ok((h, w, t.data().iter().map(|&v| f64::from(v)).collect()))
}

fn check_params(arch: &Architecture, params: &[f64]) -> Result<(), NnError> {
    if params.len() != arch.param_count() {
        return Err(NnError::ParamCount {
            expected: arch.param_count(),
            actual: params.len(),
        });
    }
    Ok(())
}

/// Mean squared error of the network output in 64-bit arithmetic.
pub fn loss(arch: &Architecture, params: &[f64], x: &Tensor, y: &Tensor) -> Result<f64, NnError> {
    check_params(arch, params)?;
    let (h, w, xs) = image_f64(x)?;
    let (_, _, ys) = image_f64(y)?;
    let out = forward_cached(arch, params, &xs, h, w)?.output(arch);
    Ok(out.iter().zip(&ys).map(|(o, t)| (o - t) * (o - t)).sum::<f64>() / (h * w) as f64)
}

/// Loss and analytic gradient in 64-bit arithmetic.
pub fn gradient(arch: &Architecture, params: &[f64], x: &Tensor, y: &Tensor) -> Result<(f64, Vec<f64>), NnError> {
    check_params(arch, params)?;
    if x.shape() != y.shape() {
        return Err(NnError::ShapeMismatch {
            input: x.shape().to_vec(),
            target: y.shape().to_vec(),
        });
    }
    let (h, w, xs) = image_f64(x)?;
    let (_, _, ys) = image_f64(y)?;
    let mut grad = vec![0.0; params.len()];
    let loss = accumulate_gradient(arch, params, &xs, &ys, h, w, 1.0, &mut grad)?;
    Ok((loss, grad))
}

/// Which ReLU inputs are positive; equal patterns at two parameter points
/// mean the loss is a smooth polynomial on the segment between them.
pub fn relu_pattern(arch: &Architecture, params: &[f64], x: &Tensor) -> Result<Vec<bool>, NnError> {
    check_params(arch, params)?;
    let (h, w, xs) = image_f64(x)?;
    Ok(forward_cached(arch, params, &xs, h, w)?.relu_pattern())
}

impl DenoiserModel {
    pub fn shadow_params(&self) -> Vec<f64> {
        self.params().to_f64()
    }
}
