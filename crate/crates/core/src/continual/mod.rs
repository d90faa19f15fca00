//! Continual-learning update math: constraint sets built from reference
//! gradients, the projected (corrected) gradient and the SGD step.

mod qp;

pub use qp::{qp_project, Projection, MAX_ROWS};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{DenoiserModel, NnError};
use crate::tensor::{ParamVector, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContinualError {
    #[error("constraint set has no rows")]
    NoConstraints,
    #[error("expected length {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("{0:?} constraint row contains non-finite values")]
    NonFiniteRow(ConstraintKind),
    #[error("gradient contains non-finite values")]
    NonFiniteGradient,
    #[error("no active set satisfies the KKT conditions")]
    NoFeasibleSubset,
    #[error("correction strength must be finite and >= 0, got {0}")]
    BadEpsilon(f64),
    #[error("learning rate must be finite and > 0, got {0}")]
    BadLearningRate(f64),
    #[error("parameter update produced a non-finite value at index {0}")]
    NonFiniteUpdate(usize),
    #[error("characteristic set is empty")]
    EmptyCharacteristicSet,
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Training hyperparameters shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Step size `sigma`.
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Correction strength; `0` disables the projection.
    pub epsilon: f64,
    /// Transmission cycles `T`.
    pub transmissions: u32,
    /// Site-rounds `S` per institution per cycle.
    pub site_rounds: u32,
    pub threshold: f64,
    pub patch: usize,
    pub stride: usize,
    pub seed: u64,
    /// Caps the batches of one site-round; `None` is a full pass over `D^k`.
    pub round_batches: Option<usize>,
    /// Global site-round at which the learning rate is multiplied by
    /// `decay_factor`.
    pub decay_round: Option<u32>,
    pub decay_factor: f64,
    /// ODM reordering enabled.
    pub switch: bool,
    /// Incoming weights initialize local training; otherwise each
    /// institution restarts from a fresh initialization.
    pub fine_tune: bool,
    pub psnr_cap: f64,
    /// Intensity range `L` for PSNR/SSIM.
    pub intensity_range: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 64,
            epsilon: 1.0,
            transmissions: 10,
            site_rounds: 5,
            threshold: 1.4759,
            patch: 64,
            stride: 64,
            seed: 0,
            round_batches: None,
            decay_round: Some(100),
            decay_factor: 0.2,
            switch: true,
            fine_tune: true,
            psnr_cap: crate::metrics::DEFAULT_PSNR_CAP,
            intensity_range: 1.0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid `{key}`: {reason}")]
pub struct ConfigError {
    pub key: &'static str,
    pub reason: String,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &'static str, reason: &str| {
            Err(ConfigError {
                key,
                reason: reason.to_string(),
            })
        };
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", "must be finite and > 0");
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return bad("epsilon", "must be finite and >= 0");
        }
        if self.transmissions == 0 {
            return bad("transmissions", "must be >= 1");
        }
        if self.site_rounds == 0 {
            return bad("site_rounds", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.patch == 0 {
            return bad("patch", "must be >= 1");
        }
        if self.stride == 0 {
            return bad("stride", "must be >= 1");
        }
        if self.round_batches == Some(0) {
            return bad("round_batches", "must be >= 1");
        }
        if !self.threshold.is_finite() {
            return bad("threshold", "must be finite");
        }
        if !(self.decay_factor > 0.0) || !self.decay_factor.is_finite() {
            return bad("decay_factor", "must be finite and > 0");
        }
        if !(self.psnr_cap > 0.0) || !self.psnr_cap.is_finite() {
            return bad("psnr_cap", "must be finite and > 0");
        }
        if !(self.intensity_range > 0.0) || !self.intensity_range.is_finite() {
            return bad("intensity_range", "must be finite and > 0");
        }
        Ok(())
    }

    /// Learning rate in force during global site-round `round` (0-based).
    pub fn rate_at(&self, round: u32) -> f64 {
        match self.decay_round {
            Some(d) if round >= d => self.learning_rate * self.decay_factor,
            _ => self.learning_rate,
        }
    }
}

/// Which reference a constraint row comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintKind {
    /// Reference gradient shipped by the previous institution.
    Previous,
    /// Running mean of this institution's batch gradients in the site-round.
    Current,
    /// `w - w*`: displacement from the parameters received from the previous
    /// institution.
    Drift,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 3] = [ConstraintKind::Previous, ConstraintKind::Current, ConstraintKind::Drift];
}

/// Up to three constraint rows `G = [g_prev, g_curr, w - w*]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientConstraintSet {
    dim: usize,
    rows: [Option<Vec<f64>>; 3],
}

impl GradientConstraintSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            rows: [None, None, None],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn slot(kind: ConstraintKind) -> usize {
        match kind {
            ConstraintKind::Previous => 0,
            ConstraintKind::Current => 1,
            ConstraintKind::Drift => 2,
        }
    }

    pub fn set_f64(&mut self, kind: ConstraintKind, row: Vec<f64>) -> Result<(), ContinualError> {
        if row.len() != self.dim {
            return Err(ContinualError::DimensionMismatch {
                expected: self.dim,
                actual: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(ContinualError::NonFiniteRow(kind));
        }
        self.rows[Self::slot(kind)] = Some(row);
        Ok(())
    }

    pub fn set(&mut self, kind: ConstraintKind, row: &[f32]) -> Result<(), ContinualError> {
        self.set_f64(kind, row.iter().map(|&v| f64::from(v)).collect())
    }

    /// Sets the drift row `w - w*` from current and reference parameters.
    pub fn set_drift(&mut self, params: &ParamVector, anchor: &ParamVector) -> Result<(), ContinualError> {
        if anchor.len() != params.len() {
            return Err(ContinualError::DimensionMismatch {
                expected: params.len(),
                actual: anchor.len(),
            });
        }
        let row = params
            .as_slice()
            .iter()
            .zip(anchor.as_slice())
            .map(|(&w, &a)| f64::from(w) - f64::from(a))
            .collect();
        self.set_f64(ConstraintKind::Drift, row)
    }

    pub fn clear(&mut self, kind: ConstraintKind) {
        self.rows[Self::slot(kind)] = None;
    }

    pub fn get(&self, kind: ConstraintKind) -> Option<&[f64]> {
        self.rows[Self::slot(kind)].as_deref()
    }

    pub fn rows(&self) -> impl Iterator<Item = (ConstraintKind, &[f64])> {
        ConstraintKind::ALL
            .into_iter()
            .filter_map(move |k| self.get(k).map(|r| (k, r)))
    }

    pub fn len(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Blend of the raw gradient with its projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Corrected {
    pub gradient: ParamVector,
    /// `|g - g~|_1`.
    pub l1_gap: f64,
    pub projection: Projection,
}

/// `g + eps (g~ - g)` with `g~ = qp_project(g, G)`.
pub fn corrected_gradient(
    g: &ParamVector,
    set: &GradientConstraintSet,
    epsilon: f64,
) -> Result<Corrected, ContinualError> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(ContinualError::BadEpsilon(epsilon));
    }
    let raw = g.to_f64();
    let projection = qp_project(&raw, set)?;
    let mut l1_gap = 0.0;
    let blended: Vec<f32> = raw
        .iter()
        .zip(&projection.value)
        .map(|(&gi, &pi)| {
            l1_gap += (gi - pi).abs();
            (gi + epsilon * (pi - gi)) as f32
        })
        .collect();
    let gradient = ParamVector::new(blended).map_err(|_| ContinualError::NonFiniteGradient)?;
    Ok(Corrected {
        gradient,
        l1_gap,
        projection,
    })
}

/// `w - lr * g`.
pub fn update_params(
    params: &ParamVector,
    gradient: &ParamVector,
    learning_rate: f64,
) -> Result<ParamVector, ContinualError> {
    if !(learning_rate > 0.0) || !learning_rate.is_finite() {
        return Err(ContinualError::BadLearningRate(learning_rate));
    }
    if params.len() != gradient.len() {
        return Err(ContinualError::DimensionMismatch {
            expected: params.len(),
            actual: gradient.len(),
        });
    }
    let next: Vec<f32> = params
        .as_slice()
        .iter()
        .zip(gradient.as_slice())
        .map(|(&w, &g)| (f64::from(w) - learning_rate * f64::from(g)) as f32)
        .collect();
    if let Some(i) = next.iter().position(|v| !v.is_finite()) {
        return Err(ContinualError::NonFiniteUpdate(i));
    }
    Ok(ParamVector::new(next).expect("checked finite"))
}

/// Mean data-term gradient over `(noisy, clean)` characteristic pairs.
pub fn reference_gradient(model: &DenoiserModel, pairs: &[(Tensor, Tensor)]) -> Result<ParamVector, ContinualError> {
    if pairs.is_empty() {
        return Err(ContinualError::EmptyCharacteristicSet);
    }
    let batch: Vec<(&Tensor, &Tensor)> = pairs.iter().map(|(x, y)| (x, y)).collect();
    Ok(model.batch_gradient(&batch)?.1)
}

/// Incrementally averaged gradient for the `Current` row.
#[derive(Debug, Clone, Default)]
pub struct RunningMean {
    mean: Vec<f64>,
    count: usize,
}

impl RunningMean {
    pub fn push(&mut self, g: &ParamVector) {
        if self.count == 0 {
            self.mean = g.to_f64();
        } else {
            let k = (self.count + 1) as f64;
            for (m, &v) in self.mean.iter_mut().zip(g.as_slice()) {
                *m += (f64::from(v) - *m) / k;
            }
        }
        self.count += 1;
    }

    pub fn reset(&mut self) {
        self.mean.clear();
        self.count = 0;
    }

    pub fn value(&self) -> Option<&[f64]> {
        (self.count > 0).then_some(self.mean.as_slice())
    }
}
