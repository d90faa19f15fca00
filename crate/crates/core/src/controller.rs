//! Intermediate controller: the performance assessment MLP (PAM) that turns
//! `[p, s, m]` into a score, and the online decision rule (ODM) that reorders
//! institutions and adjusts their site-rounds.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continual::TrainConfig;
use crate::metrics::{MetricVector, DEFAULT_PSNR_CAP};
use crate::tensor::ParamVector;

pub const PAM_WIDTHS: [usize; 5] = [3, 16, 16, 8, 1];
pub const MIN_CALIBRATION: usize = 32;
/// MSE that maps to the top of the normalized range.
pub const MSE_SCALE: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error("metric vector {0:?} is not finite")]
    NonFiniteInput(MetricVector),
    #[error("no score for institution {0}")]
    MissingScore(u32),
    #[error("score for unknown institution {0}")]
    UnexpectedScore(u32),
    #[error("score for institution {0} is not finite")]
    NonFiniteScore(u32),
    #[error("need at least {needed} calibration points, got {got}")]
    InsufficientCalibration { needed: usize, got: usize },
    #[error("calibration target {0} is not finite")]
    BadTarget(f64),
    #[error("PAM expects {expected} weights, got {actual}")]
    WeightCount { expected: usize, actual: usize },
    #[error("directive is inconsistent: {0}")]
    BadDirective(&'static str),
}

/// `[p / cap, s, m / 0.01]`, each clamped to `[0, 1]` except SSIM which is
/// used as-is. `+inf` PSNR is clamped to the cap.
pub fn normalize(mv: &MetricVector, cap: f64) -> Result<[f64; 3], ControllerError> {
    let psnr_ok = mv.psnr.is_finite() || mv.psnr == f64::INFINITY;
    if !psnr_ok || !mv.ssim.is_finite() || !mv.mse.is_finite() {
        return Err(ControllerError::NonFiniteInput(*mv));
    }
    Ok([mv.psnr.min(cap) / cap, mv.ssim, (mv.mse / MSE_SCALE).clamp(0.0, 1.0)])
}

/// Closed-form score `0.5 * min(p, cap) / 30 + 0.5 * s`.
pub fn fallback_score(mv: &MetricVector, cap: f64) -> Result<f64, ControllerError> {
    normalize(mv, cap)?;
    Ok(0.5 * mv.psnr.min(cap) / 30.0 + 0.5 * mv.ssim)
}

/// Four fully connected layers `3 -> 16 -> 16 -> 8 -> 1` with ReLU between.
#[derive(Debug, Clone, PartialEq)]
pub struct PamMlp {
    /// Per layer: row-major `[out][in]` weights followed by `out` biases.
    weights: Vec<f32>,
    pub psnr_cap: f64,
}

fn layer_spans() -> impl Iterator<Item = (usize, usize, usize)> {
    let mut offset = 0;
    PAM_WIDTHS.windows(2).map(move |w| {
        let start = offset;
        offset += w[0] * w[1] + w[1];
        (start, w[0], w[1])
    })
}

impl PamMlp {
    pub fn param_count() -> usize {
        PAM_WIDTHS.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform fan-in initialization from a seeded stream. Biases and the
    /// output layer start at zero, so a fresh network is the constant 0.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0.0f32; Self::param_count()];
        for (start, fan_in, fan_out) in layer_spans().take(PAM_WIDTHS.len() - 2) {
            let bound = (2.0 / fan_in as f64).sqrt() as f32;
            for v in &mut weights[start..start + fan_in * fan_out] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Self {
            weights,
            psnr_cap: DEFAULT_PSNR_CAP,
        }
    }

    pub fn from_params(params: &ParamVector) -> Result<Self, ControllerError> {
        if params.len() != Self::param_count() {
            return Err(ControllerError::WeightCount {
                expected: Self::param_count(),
                actual: params.len(),
            });
        }
        Ok(Self {
            weights: params.as_slice().to_vec(),
            psnr_cap: DEFAULT_PSNR_CAP,
        })
    }

    pub fn to_params(&self) -> ParamVector {
        ParamVector::new(self.weights.clone()).expect("PAM weights are finite")
    }

    pub fn score(&self, mv: &MetricVector) -> Result<f64, ControllerError> {
        let x = normalize(mv, self.psnr_cap)?;
        let w: Vec<f64> = self.weights.iter().map(|&v| f64::from(v)).collect();
        Ok(forward(&w, &x).0)
    }
}

/// Forward pass in 64-bit; returns the output and every post-activation.
fn forward(w: &[f64], x: &[f64; 3]) -> (f64, Vec<Vec<f64>>) {
    let mut acts = vec![x.to_vec()];
    let last = PAM_WIDTHS.len() - 2;
    for (li, (start, fan_in, fan_out)) in layer_spans().enumerate() {
        let input = acts.last().unwrap();
        let bias = start + fan_in * fan_out;
        let out: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &w[start + o * fan_in..start + (o + 1) * fan_in];
                let z = w[bias + o] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                if li == last {
                    z
                } else {
                    z.max(0.0)
                }
            })
            .collect();
        acts.push(out);
    }
    (acts.last().unwrap()[0], acts)
}

/// Adds `scale * d(out)/dw` into `grad`.
fn backward(w: &[f64], acts: &[Vec<f64>], scale: f64, grad: &mut [f64]) {
    let spans: Vec<_> = layer_spans().collect();
    let mut delta = vec![scale];
    for (li, &(start, fan_in, fan_out)) in spans.iter().enumerate().rev() {
        let input = &acts[li];
        let bias = start + fan_in * fan_out;
        let mut next = vec![0.0; fan_in];
        for o in 0..fan_out {
            let d = delta[o];
            if d == 0.0 {
                continue;
            }
            grad[bias + o] += d;
            for i in 0..fan_in {
                grad[start + o * fan_in + i] += d * input[i];
                next[i] += d * w[start + o * fan_in + i];
            }
        }
        if li > 0 {
            for (n, a) in next.iter_mut().zip(&acts[li]) {
                if *a <= 0.0 {
                    *n = 0.0;
                }
            }
        }
        delta = next;
    }
}

/// Scorer used by the controller.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Scorer {
    #[default]
    Fallback,
    Pam(PamMlp),
}

impl Scorer {
    pub fn score(&self, mv: &MetricVector, cap: f64) -> Result<f64, ControllerError> {
        match self {
            Scorer::Fallback => fallback_score(mv, cap),
            Scorer::Pam(p) => p.score(mv),
        }
    }
}

pub fn pam_score(pam: &PamMlp, mv: &MetricVector) -> Result<f64, ControllerError> {
    pam.score(mv)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainOptions {
    pub seed: u64,
    pub target_mse: f64,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub psnr_cap: f64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            target_mse: 1e-5,
            max_steps: 5000,
            learning_rate: 0.05,
            momentum: 0.9,
            psnr_cap: DEFAULT_PSNR_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub pam: PamMlp,
    pub steps: usize,
    pub final_mse: f64,
}

/// Full-batch gradient descent with heavy-ball momentum on the squared
/// calibration error, in 64-bit.
pub fn pam_pretrain(
    calibration: &[(MetricVector, f64)],
    opts: &PretrainOptions,
) -> Result<Pretrained, ControllerError> {
    if calibration.len() < MIN_CALIBRATION {
        return Err(ControllerError::InsufficientCalibration {
            needed: MIN_CALIBRATION,
            got: calibration.len(),
        });
    }
    let mut inputs = Vec::with_capacity(calibration.len());
    for (mv, target) in calibration {
        if !target.is_finite() {
            return Err(ControllerError::BadTarget(*target));
        }
        inputs.push((normalize(mv, opts.psnr_cap)?, *target));
    }
    let n = inputs.len() as f64;
    let mut w: Vec<f64> = PamMlp::new(opts.seed).weights.iter().map(|&v| f64::from(v)).collect();
    let mut velocity = vec![0.0; w.len()];
    let mut grad = vec![0.0; w.len()];
    let mut steps = 0;
    let mut mse;
    loop {
        grad.iter_mut().for_each(|g| *g = 0.0);
        mse = 0.0;
        for (x, t) in &inputs {
            let (y, acts) = forward(&w, x);
            let r = y - t;
            mse += r * r / n;
            backward(&w, &acts, 2.0 * r / n, &mut grad);
        }
        if mse <= opts.target_mse || steps == opts.max_steps {
            break;
        }
        steps += 1;
        for ((wi, vi), gi) in w.iter_mut().zip(&mut velocity).zip(&grad) {
            *vi = opts.momentum * *vi - opts.learning_rate * gi;
            *wi += *vi;
        }
    }
    Ok(Pretrained {
        pam: PamMlp {
            weights: w.iter().map(|&x| x as f32).collect(),
            psnr_cap: opts.psnr_cap,
        },
        steps,
        final_mse: mse,
    })
}

/// ODM output: the ring order and per-institution site-round budget for the
/// next cycle.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlDirective {
    pub sequence: Vec<u32>,
    /// Site-rounds per entry of `sequence`.
    pub site_rounds: Vec<u32>,
    pub trans_rounds: u32,
    /// Consecutive cycles in which every institution met the threshold.
    pub streak: u32,
    pub converged: bool,
}

impl ControlDirective {
    pub fn initial(sequence: Vec<u32>, cfg: &TrainConfig) -> Self {
        let n = sequence.len();
        Self {
            sequence,
            site_rounds: vec![cfg.site_rounds; n],
            trans_rounds: cfg.transmissions,
            streak: 0,
            converged: false,
        }
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        if self.sequence.is_empty() {
            return Err(ControllerError::BadDirective("empty sequence"));
        }
        if self.site_rounds.len() != self.sequence.len() {
            return Err(ControllerError::BadDirective(
                "site_rounds length differs from sequence",
            ));
        }
        let mut ids = self.sequence.clone();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.sequence.len() {
            return Err(ControllerError::BadDirective("sequence repeats an institution"));
        }
        if self.trans_rounds == 0 || self.site_rounds.contains(&0) {
            return Err(ControllerError::BadDirective("round counts must be >= 1"));
        }
        Ok(())
    }

    pub fn rounds_for(&self, id: u32) -> Option<u32> {
        self.sequence.iter().position(|&k| k == id).map(|i| self.site_rounds[i])
    }

    /// Same directive with the sequence rotated so `first` leads.
    pub fn rotated_to(&self, first: u32) -> Self {
        let mut out = self.clone();
        if let Some(i) = self.sequence.iter().position(|&k| k == first) {
            out.sequence.rotate_left(i);
            out.site_rounds.rotate_left(i);
        }
        out
    }
}

pub fn odm_triggers(scores: &BTreeMap<u32, f64>, threshold: f64) -> bool {
    scores.values().any(|&r| r >= threshold)
}

/// Decision rule. When some score reaches the threshold the sequence is
/// sorted by ascending score (ties by id), the lowest scorer gets
/// `min(S + 2, 2S)` site-rounds and the rest `S`; when every score reaches
/// it for two consecutive cycles the run is converged. Otherwise the
/// directive is kept, with the streak reset.
pub fn odm_decide(
    scores: &BTreeMap<u32, f64>,
    cfg: &TrainConfig,
    current: &ControlDirective,
) -> Result<ControlDirective, ControllerError> {
    current.validate()?;
    for id in &current.sequence {
        match scores.get(id) {
            None => return Err(ControllerError::MissingScore(*id)),
            Some(r) if r.is_nan() => return Err(ControllerError::NonFiniteScore(*id)),
            _ => {}
        }
    }
    if let Some(extra) = scores.keys().find(|k| !current.sequence.contains(k)) {
        return Err(ControllerError::UnexpectedScore(*extra));
    }

    if !odm_triggers(scores, cfg.threshold) {
        return Ok(ControlDirective {
            streak: 0,
            ..current.clone()
        });
    }

    let mut ranked: Vec<(u32, f64)> = current.sequence.iter().map(|&k| (k, scores[&k])).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let worst = ranked[0].0;
    let sequence = if cfg.switch {
        ranked.iter().map(|&(k, _)| k).collect()
    } else {
        current.sequence.clone()
    };
    let s = cfg.site_rounds;
    let site_rounds = sequence
        .iter()
        .map(|&k| if k == worst { (s + 2).min(2 * s) } else { s })
        .collect();
    let all_pass = scores.values().all(|&r| r >= cfg.threshold);
    let streak = if all_pass { current.streak + 1 } else { 0 };
    Ok(ControlDirective {
        sequence,
        site_rounds,
        trans_rounds: current.trans_rounds,
        streak,
        converged: streak >= 2,
    })
}
