//! Runs the ring protocol end to end, plus the FedAvg, centralized and
//! naive-sequential baselines, and assembles comparable reports.

mod baselines;
mod icp2p;
mod local;
mod report;

use std::collections::BTreeMap;
use std::net::SocketAddr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continual::{ConfigError, ContinualError, TrainConfig};
use crate::controller::{ControllerError, Scorer};
use crate::data::{splitmix64, DataError, InstitutionDataset, Split};
use crate::metrics::{evaluate, MetricError, MetricVector};
use crate::nn::{Architecture, DenoiserModel, NnError};
use crate::proto::{ProtocolError, TransportError, WireError};
use crate::tensor::Tensor;

pub use baselines::{fedavg_average, run_centralized, run_fedavg, run_sequential};
pub use icp2p::run_icp2pfl;
pub use report::{CsvRow, MessageStats, RunReport, TrajectoryPoint, TranscriptEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Icp2pfl,
    FedAvg,
    /// Centralized training on one institution's data.
    ClSi(u32),
    /// Centralized training on the pooled data of every institution.
    ClMi,
    /// Plain sequential fine-tuning around the ring, no correction or
    /// controller.
    SeqAblation,
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Icp2pfl => "icp2pfl".into(),
            Method::FedAvg => "fedavg".into(),
            Method::ClSi(k) => format!("cl-si-{k}"),
            Method::ClMi => "cl-mi".into(),
            Method::SeqAblation => "seq-ablation".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CentralMode {
    Si(u32),
    Mi,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    InProcess,
    /// TCP; listeners on the given addresses, or loopback ephemeral ports
    /// when empty.
    Socket(Vec<(u32, SocketAddr)>),
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub arch: Architecture,
    pub scorer: Scorer,
    pub transport: TransportKind,
}

impl RunConfig {
    pub fn new(train: TrainConfig, arch: Architecture) -> Self {
        Self {
            train,
            arch,
            scorer: Scorer::Fallback,
            transport: TransportKind::InProcess,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("need at least {needed} institutions, got {got}")]
    TooFewInstitutions { needed: usize, got: usize },
    #[error("institution {0} appears twice")]
    DuplicateInstitution(u32),
    #[error("institution {0} is not part of the run")]
    UnknownInstitution(u32),
    #[error("institution {0} has no patches at the configured patch size")]
    NoPatches(u32),
    #[error("institutions disagree on image size")]
    MixedImageSizes,
    #[error("training diverged at institution {institution}, cycle {cycle}, site-round {round}: loss {loss}")]
    Diverged {
        institution: u32,
        cycle: u32,
        round: u32,
        loss: f64,
    },
    #[error("token invariant violated: {0} nodes hold the model")]
    TokenInvariant(usize),
    #[error("delivered bytes differ from the bytes sent")]
    CorruptDelivery,
    #[error("nodes finished with different parameters")]
    DigestDisagreement,
    #[error("cannot average: {0}")]
    Average(&'static str),
    #[error("protocol stalled before every node terminated")]
    Stalled,
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Continual(#[from] ContinualError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Training patches of one institution.
pub(crate) struct Patches {
    pub institution: u32,
    pub pairs: Vec<(Tensor, Tensor)>,
}

pub(crate) fn validate_inputs(cfg: &RunConfig, datasets: &[InstitutionDataset], min: usize) -> Result<(), RunError> {
    cfg.train.validate()?;
    if datasets.len() < min {
        return Err(RunError::TooFewInstitutions {
            needed: min,
            got: datasets.len(),
        });
    }
    let mut seen = std::collections::BTreeSet::new();
    for d in datasets {
        if !seen.insert(d.id()) {
            return Err(RunError::DuplicateInstitution(d.id()));
        }
        d.protocol.validate()?;
    }
    let sizes: std::collections::BTreeSet<_> = datasets
        .iter()
        .flat_map(|d| {
            Split::ALL
                .iter()
                .flat_map(move |&s| d.split(s).iter().map(|p| p.clean.shape().to_vec()))
        })
        .collect();
    if sizes.len() > 1 {
        return Err(RunError::MixedImageSizes);
    }
    Ok(())
}

pub(crate) fn training_patches(cfg: &TrainConfig, d: &InstitutionDataset) -> Result<Patches, RunError> {
    let pairs = d.patches(Split::Train, cfg.patch, cfg.stride)?;
    if pairs.is_empty() {
        return Err(RunError::NoPatches(d.id()));
    }
    Ok(Patches {
        institution: d.id(),
        pairs,
    })
}

/// Initial weights shared by every method for a given seed.
pub fn initial_model(cfg: &RunConfig) -> DenoiserModel {
    DenoiserModel::new(cfg.arch, splitmix64(cfg.train.seed ^ 0x1c92_0f17_u64))
}

/// Visiting order of `n` patches for one site-round, keyed by
/// `(seed, institution, cycle, round)`.
pub fn batch_order(seed: u64, institution: u32, cycle: u32, round: u32, n: usize) -> Vec<usize> {
    let key =
        splitmix64(seed) ^ splitmix64((u64::from(institution) << 40) | (u64::from(cycle) << 20) | u64::from(round));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Index ranges of the batches in one site-round.
pub(crate) fn batches(cfg: &TrainConfig, n: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let b = cfg.batch_size;
    let count = n.div_ceil(b).min(cfg.round_batches.unwrap_or(usize::MAX));
    (0..count).map(move |i| i * b..((i + 1) * b).min(n))
}

/// Mean metrics of the model's output over full images of `split`.
pub fn evaluate_split(
    model: &DenoiserModel,
    data: &InstitutionDataset,
    split: Split,
    cfg: &TrainConfig,
) -> Result<MetricVector, RunError> {
    let mut items = Vec::with_capacity(data.split(split).len());
    for pair in data.split(split) {
        let out = model.forward(&pair.noisy)?;
        items.push(evaluate(&out, &pair.clean, cfg.intensity_range)?);
    }
    MetricVector::mean(&items, cfg.psnr_cap).ok_or(RunError::Metric(MetricError::Empty))
}

/// Metrics of the unprocessed low-dose input on `split`.
pub fn input_metrics(data: &InstitutionDataset, split: Split, cfg: &TrainConfig) -> Result<MetricVector, RunError> {
    let mut items = Vec::with_capacity(data.split(split).len());
    for pair in data.split(split) {
        items.push(evaluate(&pair.noisy, &pair.clean, cfg.intensity_range)?);
    }
    MetricVector::mean(&items, cfg.psnr_cap).ok_or(RunError::Metric(MetricError::Empty))
}

/// Appends test and characteristic metrics of `model` on every institution.
pub(crate) fn record_cycle(
    report: &mut RunReport,
    model: &DenoiserModel,
    datasets: &[InstitutionDataset],
    cycle: u32,
    cfg: &TrainConfig,
    scores: Option<&BTreeMap<u32, f64>>,
) -> Result<(), RunError> {
    for d in datasets {
        for split in [Split::Test, Split::Characteristic] {
            let metrics = evaluate_split(model, d, split, cfg)?;
            report.trajectory.push(TrajectoryPoint {
                cycle,
                institution: d.id(),
                split,
                metrics,
                rho: scores.and_then(|s| s.get(&d.id()).copied()),
            });
        }
    }
    report.cycles = cycle;
    Ok(())
}

pub(crate) fn record_inputs(
    report: &mut RunReport,
    datasets: &[InstitutionDataset],
    cfg: &TrainConfig,
) -> Result<(), RunError> {
    for d in datasets {
        for split in [Split::Test, Split::Characteristic] {
            report.input_metrics.push(TrajectoryPoint {
                cycle: 0,
                institution: d.id(),
                split,
                metrics: input_metrics(d, split, cfg)?,
                rho: None,
            });
        }
    }
    Ok(())
}

pub fn run_method(method: Method, cfg: &RunConfig, datasets: &[InstitutionDataset]) -> Result<RunReport, RunError> {
    match method {
        Method::Icp2pfl => run_icp2pfl(cfg, datasets),
        Method::FedAvg => run_fedavg(cfg, datasets),
        Method::ClSi(k) => run_centralized(cfg, datasets, CentralMode::Si(k)),
        Method::ClMi => run_centralized(cfg, datasets, CentralMode::Mi),
        Method::SeqAblation => run_sequential(cfg, datasets),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_order_is_a_keyed_permutation() {
        let a = batch_order(1, 2, 3, 4, 50);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, batch_order(1, 2, 3, 4, 50));
        assert_ne!(a, batch_order(1, 2, 3, 5, 50));
        assert_ne!(a, batch_order(2, 2, 3, 4, 50));
    }

    #[test]
    fn batch_ranges() {
        let cfg = TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        };
        let r: Vec<_> = batches(&cfg, 10).collect();
        assert_eq!(r, vec![0..4, 4..8, 8..10]);
        let capped = TrainConfig {
            round_batches: Some(2),
            ..cfg
        };
        assert_eq!(batches(&capped, 10).count(), 2);
    }
}
