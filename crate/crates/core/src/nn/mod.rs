//! Residual denoising network with hand-written reverse-mode gradients.
//!
//! Layout: a `1 -> C` head convolution with ReLU, `B` residual blocks of
//! `conv -> ReLU -> conv` added to the block input, and a linear `C -> 1`
//! tail. With the global residual enabled the tail output is added to the
//! input image, so the network predicts the noise to remove.

pub mod conv;
pub mod shadow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamVector, Tensor, TensorError};
use conv::{Plane, Real, TAPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("input must be a single-channel image, got shape {0:?}")]
    NotAnImage(Vec<usize>),
    #[error("input shape {input:?} does not match target shape {target:?}")]
    ShapeMismatch { input: Vec<usize>, target: Vec<usize> },
    #[error("architecture needs {expected} parameters, got {actual}")]
    ParamCount { expected: usize, actual: usize },
    #[error("non-finite activation at layer {layer}")]
    NonFinite { layer: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub blocks: usize,
    pub channels: usize,
    pub global_residual: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            blocks: 3,
            channels: 16,
            global_residual: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layer {
    pub cin: usize,
    pub cout: usize,
    pub offset: usize,
    /// Layer is followed by a ReLU.
    pub rectified: bool,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.cin * self.cout * TAPS
    }

    fn len(&self) -> usize {
        self.weight_len() + self.cout
    }

    fn weight<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.offset..self.offset + self.weight_len()]
    }

    fn bias<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.offset + self.weight_len()..self.offset + self.len()]
    }

    fn grads<'a, T>(&self, grad: &'a mut [T]) -> (&'a mut [T], &'a mut [T]) {
        grad[self.offset..self.offset + self.len()].split_at_mut(self.weight_len())
    }
}

impl Architecture {
    pub fn new(blocks: usize, channels: usize) -> Self {
        Self {
            blocks,
            channels,
            global_residual: true,
        }
    }

    /// Head, then `(a, b)` per block, then tail.
    pub(crate) fn layers(&self) -> Vec<Layer> {
        let c = self.channels;
        let mut shapes = vec![(1, c, true)];
        for _ in 0..self.blocks {
            shapes.push((c, c, true));
            shapes.push((c, c, false));
        }
        shapes.push((c, 1, false));
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(cin, cout, rectified)| {
                let layer = Layer {
                    cin,
                    cout,
                    offset,
                    rectified,
                };
                offset += layer.len();
                layer
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(Layer::len).sum()
    }

    pub fn layer_count(&self) -> usize {
        2 * self.blocks + 2
    }
}

/// Activations retained for the backward pass, all in padded layout.
pub(crate) struct Cache<T> {
    plane: Plane,
    input: Vec<T>,
    head_pre: Vec<T>,
    /// `hidden[0]` is the head output, `hidden[b + 1]` the output of block `b`.
    hidden: Vec<Vec<T>>,
    block_pre: Vec<Vec<T>>,
    block_act: Vec<Vec<T>>,
    residual: Vec<T>,
}

fn check_finite<T: Real>(values: &[T], layer: usize) -> Result<(), NnError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite { layer })
    }
}

fn relu_in_place<T: Real>(values: &mut [T]) {
    for v in values {
        if *v < T::ZERO {
            *v = T::ZERO;
        }
    }
}

pub(crate) fn forward_cached<T: Real>(
    arch: &Architecture,
    params: &[T],
    image: &[T],
    height: usize,
    width: usize,
) -> Result<Cache<T>, NnError> {
    let plane = Plane { height, width };
    let len = plane.padded_len();
    let c = arch.channels;
    let layers = arch.layers();

    let mut input = vec![T::ZERO; len];
    plane.pad(image, &mut input);

    let head = layers[0];
    let mut head_pre = vec![T::ZERO; c * len];
    conv::forward(
        plane,
        &input,
        1,
        head.weight(params),
        head.bias(params),
        c,
        &mut head_pre,
    );
    check_finite(&head_pre, 0)?;
    let mut h = head_pre.clone();
    relu_in_place(&mut h);

    let mut hidden = Vec::with_capacity(arch.blocks + 1);
    let mut block_pre = Vec::with_capacity(arch.blocks);
    let mut block_act = Vec::with_capacity(arch.blocks);
    hidden.push(h);
    for b in 0..arch.blocks {
        let (la, lb) = (layers[1 + 2 * b], layers[2 + 2 * b]);
        let mut pre = vec![T::ZERO; c * len];
        conv::forward(plane, &hidden[b], c, la.weight(params), la.bias(params), c, &mut pre);
        check_finite(&pre, 1 + 2 * b)?;
        let mut act = pre.clone();
        relu_in_place(&mut act);
        let mut branch = vec![T::ZERO; c * len];
        conv::forward(plane, &act, c, lb.weight(params), lb.bias(params), c, &mut branch);
        check_finite(&branch, 2 + 2 * b)?;
        for (o, &i) in branch.iter_mut().zip(&hidden[b]) {
            *o += i;
        }
        block_pre.push(pre);
        block_act.push(act);
        hidden.push(branch);
    }

    let tail = layers[layers.len() - 1];
    let mut residual = vec![T::ZERO; len];
    conv::forward(
        plane,
        &hidden[arch.blocks],
        c,
        tail.weight(params),
        tail.bias(params),
        1,
        &mut residual,
    );
    check_finite(&residual, layers.len() - 1)?;

    Ok(Cache {
        plane,
        input,
        head_pre,
        hidden,
        block_pre,
        block_act,
        residual,
    })
}

impl<T: Real> Cache<T> {
    /// Sign of every ReLU input, head first then each block.
    pub fn relu_pattern(&self) -> Vec<bool> {
        std::iter::once(&self.head_pre)
            .chain(&self.block_pre)
            .flat_map(|plane| plane.iter().map(|&v| v > T::ZERO))
            .collect()
    }

    /// Unpadded network output.
    pub fn output(&self, arch: &Architecture) -> Vec<T> {
        let mut out = vec![T::ZERO; self.plane.height * self.plane.width];
        if arch.global_residual {
            let mut sum = self.residual.clone();
            for (s, &x) in sum.iter_mut().zip(&self.input) {
                *s += x;
            }
            self.plane.unpad(&sum, &mut out);
        } else {
            self.plane.unpad(&self.residual, &mut out);
        }
        out
    }
}

/// Accumulates `scale * d(mse)/d(params)` into `grad` and returns the
/// (unscaled) mean squared error of this sample.
pub(crate) fn accumulate_gradient<T: Real>(
    arch: &Architecture,
    params: &[T],
    image: &[T],
    target: &[T],
    height: usize,
    width: usize,
    scale: f64,
    grad: &mut [T],
) -> Result<f64, NnError> {
    let cache = forward_cached(arch, params, image, height, width)?;
    let output = cache.output(arch);
    let plane = cache.plane;
    let len = plane.padded_len();
    let c = arch.channels;
    let layers = arch.layers();
    let n = (height * width) as f64;

    let mut loss = 0.0;
    let mut diff = vec![T::ZERO; height * width];
    for ((d, &o), &t) in diff.iter_mut().zip(&output).zip(target) {
        let e = o.to_f64() - t.to_f64();
        loss += e * e;
        *d = T::from_f64(2.0 * e / n * scale);
    }
    let mut dres = vec![T::ZERO; len];
    plane.pad(&diff, &mut dres);

    let tail = layers[layers.len() - 1];
    let mut dh = vec![T::ZERO; c * len];
    {
        let (dw, db) = tail.grads(grad);
        conv::backward(
            plane,
            &cache.hidden[arch.blocks],
            c,
            tail.weight(params),
            &dres,
            1,
            dw,
            db,
            Some(&mut dh),
        );
    }

    let mut dact = vec![T::ZERO; c * len];
    let mut dskip = vec![T::ZERO; c * len];
    for b in (0..arch.blocks).rev() {
        let (la, lb) = (layers[1 + 2 * b], layers[2 + 2 * b]);
        {
            let (dw, db) = lb.grads(grad);
            conv::backward(
                plane,
                &cache.block_act[b],
                c,
                lb.weight(params),
                &dh,
                c,
                dw,
                db,
                Some(&mut dact),
            );
        }
        for (g, &z) in dact.iter_mut().zip(&cache.block_pre[b]) {
            if z <= T::ZERO {
                *g = T::ZERO;
            }
        }
        {
            let (dw, db) = la.grads(grad);
            conv::backward(
                plane,
                &cache.hidden[b],
                c,
                la.weight(params),
                &dact,
                c,
                dw,
                db,
                Some(&mut dskip),
            );
        }
        for (g, &s) in dh.iter_mut().zip(&dskip) {
            *g += s;
        }
    }

    for (g, &z) in dh.iter_mut().zip(&cache.head_pre) {
        if z <= T::ZERO {
            *g = T::ZERO;
        }
    }
    let head = layers[0];
    let (dw, db) = head.grads(grad);
    conv::backward(plane, &cache.input, 1, head.weight(params), &dh, c, dw, db, None);

    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        let layer = layers.iter().position(|l| i < l.offset + l.len()).unwrap_or(0);
        return Err(NnError::NonFinite { layer });
    }
    Ok(loss / n)
}

/// Mean squared error between two equally shaped tensors.
pub fn loss_mse(pred: &Tensor, target: &Tensor) -> Result<f64, NnError> {
    pred.ensure_same_shape(target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = f64::from(p) - f64::from(t);
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

pub const TAIL_INIT_SCALE: f64 = 0.1;

/// The denoiser `Omega_w`: an architecture plus its flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    arch: Architecture,
    params: ParamVector,
}

impl DenoiserModel {
    /// Kaiming-uniform fan-in initialization from a seeded stream; biases
    /// zero. The tail and the second convolution of every block are scaled
    /// by [`TAIL_INIT_SCALE`], so a fresh model starts close to the identity
    /// map and block outputs do not grow with depth.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0f32; arch.param_count()];
        let layers = arch.layers();
        let tail = layers.len() - 1;
        for (i, layer) in layers.into_iter().enumerate() {
            let fan_in = (layer.cin * TAPS) as f64;
            let gain = if layer.rectified { 6.0 } else { 3.0 };
            let scale = if i == tail || !layer.rectified {
                TAIL_INIT_SCALE
            } else {
                1.0
            };
            let bound = (scale * (gain / fan_in).sqrt()) as f32;
            for v in &mut values[layer.offset..layer.offset + layer.weight_len()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Self {
            arch,
            params: ParamVector::new(values).expect("finite init"),
        }
    }

    pub fn zeros(arch: Architecture) -> Self {
        Self {
            arch,
            params: ParamVector::zeros(arch.param_count()),
        }
    }

    pub fn from_params(arch: Architecture, params: ParamVector) -> Result<Self, NnError> {
        let expected = arch.param_count();
        if params.len() != expected {
            return Err(NnError::ParamCount {
                expected,
                actual: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn set_params(&mut self, params: ParamVector) -> Result<(), NnError> {
        if params.len() != self.params.len() {
            return Err(NnError::ParamCount {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    fn dims(x: &Tensor) -> Result<(usize, usize), NnError> {
        x.image_dims().ok_or_else(|| NnError::NotAnImage(x.shape().to_vec()))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NnError> {
        let (h, w) = Self::dims(x)?;
        let cache = forward_cached(&self.arch, self.params.as_slice(), x.data(), h, w)?;
        let out = cache.output(&self.arch);
        let layer = self.arch.layer_count() - 1;
        Tensor::new(x.shape().to_vec(), out).map_err(|_| NnError::NonFinite { layer })
    }

    /// Gradient of `loss_mse(forward(x), y)` with respect to the parameters.
    pub fn backward(&self, x: &Tensor, y: &Tensor) -> Result<ParamVector, NnError> {
        Ok(self.batch_gradient(&[(x, y)])?.1)
    }

    /// Mean loss and mean gradient over a batch of `(input, target)` pairs.
    pub fn batch_gradient(&self, batch: &[(&Tensor, &Tensor)]) -> Result<(f64, ParamVector), NnError> {
        if batch.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0f32; self.params.len()];
        let mut loss = 0.0;
        for (x, y) in batch {
            if x.shape() != y.shape() {
                return Err(NnError::ShapeMismatch {
                    input: x.shape().to_vec(),
                    target: y.shape().to_vec(),
                });
            }
            let (h, w) = Self::dims(x)?;
            loss += accumulate_gradient(
                &self.arch,
                self.params.as_slice(),
                x.data(),
                y.data(),
                h,
                w,
                scale,
                &mut grad,
            )?;
        }
        Ok((loss * scale, ParamVector::new(grad)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::image(h, w, (0..h * w).map(|i| (i % 17) as f32 / 16.0).collect()).unwrap()
    }

    #[test]
    fn param_count_matches_layer_shapes() {
        let arch = Architecture::new(3, 16);
        let head = 16 * 9 + 16;
        let block = 2 * (16 * 16 * 9 + 16);
        let tail = 16 * 9 + 1;
        assert_eq!(arch.param_count(), head + 3 * block + tail);
        assert_eq!(arch.layer_count(), 8);
    }

    #[test]
    fn zero_weights_with_global_residual_is_identity() {
        let model = DenoiserModel::zeros(Architecture::new(2, 4));
        let x = ramp(9, 11);
        assert_eq!(model.forward(&x).unwrap(), x);
    }

    #[test]
    fn output_shape_equals_input_shape() {
        let model = DenoiserModel::new(Architecture::new(1, 4), 3);
        let x = ramp(64, 64);
        assert_eq!(model.forward(&x).unwrap().shape(), &[64, 64]);
        let x3 = Tensor::zeros(vec![1, 12, 10]).unwrap();
        assert_eq!(model.forward(&x3).unwrap().shape(), &[1, 12, 10]);
    }

    #[test]
    fn rejects_non_image_input() {
        let model = DenoiserModel::zeros(Architecture::new(1, 2));
        let x = Tensor::zeros(vec![2, 4, 4]).unwrap();
        assert!(matches!(model.forward(&x), Err(NnError::NotAnImage(_))));
        let y = Tensor::zeros(vec![4, 5]).unwrap();
        let x = Tensor::zeros(vec![4, 4]).unwrap();
        assert!(matches!(model.backward(&x, &y), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn loss_mse_identities() {
        let a = ramp(4, 4);
        assert_eq!(loss_mse(&a, &a).unwrap(), 0.0);
        let b = Tensor::filled(vec![4, 4], 0.5).unwrap();
        let c = Tensor::filled(vec![4, 4], 0.4).unwrap();
        assert!((loss_mse(&b, &c).unwrap() - 0.01).abs() < 1e-8);
        assert!(loss_mse(&a, &Tensor::zeros(vec![16]).unwrap()).is_err());
    }

    #[test]
    fn gradient_vanishes_at_exact_fit() {
        let model = DenoiserModel::new(Architecture::new(2, 4), 11);
        let x = ramp(8, 8);
        let y = model.forward(&x).unwrap();
        let g = model.backward(&x, &y).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_length_matches_params() {
        let model = DenoiserModel::new(Architecture::new(3, 16), 1);
        let x = ramp(16, 16);
        let y = Tensor::zeros(vec![16, 16]).unwrap();
        assert_eq!(model.backward(&x, &y).unwrap().len(), model.params().len());
    }

    #[test]
    fn non_finite_activation_reports_layer() {
        let arch = Architecture::new(1, 2);
        let layers = arch.layers();
        let mut values = vec![0.0f32; arch.param_count()];
        // head: zero weights, unit bias => every hidden unit is 1.0
        let head = layers[0];
        for v in &mut values[head.offset + head.weight_len()..head.offset + head.len()] {
            *v = 1.0;
        }
        let a = layers[1];
        for v in &mut values[a.offset..a.offset + a.weight_len()] {
            *v = f32::MAX;
        }
        let model = DenoiserModel::from_params(arch, ParamVector::new(values).unwrap()).unwrap();
        let x = Tensor::filled(vec![6, 6], 1.0).unwrap();
        let y = Tensor::zeros(vec![6, 6]).unwrap();
        assert_eq!(model.backward(&x, &y), Err(NnError::NonFinite { layer: 1 }));
        assert_eq!(model.forward(&x), Err(NnError::NonFinite { layer: 1 }));
    }

    #[test]
    fn same_seed_same_bits() {
        let arch = Architecture::new(2, 4);
        let a = DenoiserModel::new(arch, 5);
        let b = DenoiserModel::new(arch, 5);
        assert_eq!(a.params().digest(), b.params().digest());
        let x = ramp(10, 10);
        let y = Tensor::zeros(vec![10, 10]).unwrap();
        assert_eq!(a.backward(&x, &y).unwrap(), b.backward(&x, &y).unwrap());
        assert_ne!(DenoiserModel::new(arch, 6).params(), a.params());
    }
}
