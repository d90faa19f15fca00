//! One site-round of local minibatch training, shared by every method.

use crate::continual::{
    corrected_gradient, update_params, ConstraintKind, GradientConstraintSet, RunningMean, TrainConfig,
};
use crate::nn::{DenoiserModel, NnError};
use crate::tensor::{ParamVector, Tensor};

use super::report::CorrectionStats;
use super::{batch_order, batches, RunError};

/// Reference rows for the projected update.
pub(crate) struct Correction<'a> {
    pub epsilon: f64,
    pub g_prev: Option<&'a ParamVector>,
    /// Parameters received from the previous institution.
    pub anchor: Option<&'a ParamVector>,
}

pub(crate) struct RoundKey {
    pub institution: u32,
    pub cycle: u32,
    pub round: u32,
    /// Global site-round counter for the learning-rate schedule.
    pub global_round: u32,
}

pub(crate) fn train_round(
    model: &mut DenoiserModel,
    pairs: &[(Tensor, Tensor)],
    cfg: &TrainConfig,
    key: &RoundKey,
    correction: Option<&Correction<'_>>,
    stats: &mut CorrectionStats,
) -> Result<(), RunError> {
    let order = batch_order(cfg.seed, key.institution, key.cycle, key.round, pairs.len());
    let rate = cfg.rate_at(key.global_round);
    let mut running = RunningMean::default();
    let diverged = |loss: f64| RunError::Diverged {
        institution: key.institution,
        cycle: key.cycle + 1,
        round: key.round + 1,
        loss,
    };
    for range in batches(cfg, pairs.len()) {
        let batch: Vec<(&Tensor, &Tensor)> = order[range].iter().map(|&i| (&pairs[i].0, &pairs[i].1)).collect();
        let (loss, g) = match model.batch_gradient(&batch) {
            Ok(v) => v,
            Err(NnError::NonFinite { .. }) => return Err(diverged(f64::NAN)),
            Err(e) => return Err(e.into()),
        };
        if !loss.is_finite() || g.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(diverged(loss));
        }
        let step = match correction {
            Some(c) if c.epsilon > 0.0 => {
                running.push(&g);
                let mut set = GradientConstraintSet::new(g.len());
                if let Some(prev) = c.g_prev {
                    set.set(ConstraintKind::Previous, prev.as_slice())?;
                }
                set.set_f64(ConstraintKind::Current, running.value().unwrap().to_vec())?;
                if let Some(anchor) = c.anchor {
                    set.set_drift(model.params(), anchor)?;
                }
                let corrected = corrected_gradient(&g, &set, c.epsilon)?;
                stats.steps += 1;
                if !corrected.projection.unchanged {
                    stats.projected_steps += 1;
                }
                stats.mean_l1_gap += (corrected.l1_gap - stats.mean_l1_gap) / stats.steps as f64;
                corrected.gradient
            }
            _ => {
                stats.steps += 1;
                g
            }
        };
        let next = update_params(model.params(), &step, rate).map_err(|_| diverged(loss))?;
        model.set_params(next)?;
    }
    Ok(())
}
