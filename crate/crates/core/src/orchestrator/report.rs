use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::controller::ControlDirective;
use crate::data::Split;
use crate::metrics::MetricVector;
use crate::proto::MessageKind;
use crate::tensor::ParamVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// 1-based cycle after which the model was evaluated.
    pub cycle: u32,
    pub institution: u32,
    pub split: Split,
    pub metrics: MetricVector,
    /// Score the controller assigned to this institution in this cycle.
    pub rho: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub index: u64,
    pub from: u32,
    pub to: u32,
    pub kind: MessageKind,
    pub len: u64,
    pub crc: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageStats {
    pub model_packets: u64,
    pub broadcast_forwards: u64,
    pub bytes: u64,
}

/// Per institution and cycle: how often the projection changed the step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionStats {
    pub cycle: u32,
    pub institution: u32,
    pub steps: u64,
    pub projected_steps: u64,
    pub mean_l1_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub seed: u64,
    pub institutions: Vec<u32>,
    pub cycles: u32,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Metrics of the raw low-dose inputs, `cycle` 0.
    pub input_metrics: Vec<TrajectoryPoint>,
    pub final_scores: BTreeMap<u32, f64>,
    pub directives: Vec<ControlDirective>,
    pub converged: bool,
    pub final_digest: String,
    pub node_digests: BTreeMap<u32, String>,
    pub messages: MessageStats,
    pub transcript: Vec<TranscriptEntry>,
    pub corrections: Vec<CorrectionStats>,
    /// Kept out of the serialized form so reports are reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub final_params: Option<ParamVector>,
}

/// One line of the flat CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub method: String,
    pub seed: u64,
    pub cycle: u32,
    pub institution: u32,
    pub split: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub rho: Option<f64>,
}

impl RunReport {
    pub(crate) fn new(method: String, seed: u64, institutions: Vec<u32>) -> Self {
        Self {
            method,
            seed,
            institutions,
            cycles: 0,
            trajectory: Vec::new(),
            input_metrics: Vec::new(),
            final_scores: BTreeMap::new(),
            directives: Vec::new(),
            converged: false,
            final_digest: String::new(),
            node_digests: BTreeMap::new(),
            messages: MessageStats::default(),
            transcript: Vec::new(),
            corrections: Vec::new(),
            wall_clock_secs: 0.0,
            final_params: None,
        }
    }

    /// Metrics after the last executed cycle.
    pub fn final_metrics(&self, institution: u32, split: Split) -> Option<MetricVector> {
        self.trajectory
            .iter()
            .rev()
            .find(|p| p.cycle == self.cycles && p.institution == institution && p.split == split)
            .map(|p| p.metrics)
    }

    pub fn input_psnr(&self, institution: u32, split: Split) -> Option<f64> {
        self.input_metrics
            .iter()
            .find(|p| p.institution == institution && p.split == split)
            .map(|p| p.metrics.psnr)
    }

    /// Mean over institutions of the final test PSNR.
    pub fn mean_final_test_psnr(&self) -> Option<f64> {
        let v: Option<Vec<f64>> = self
            .institutions
            .iter()
            .map(|&k| self.final_metrics(k, Split::Test).map(|m| m.psnr))
            .collect();
        let v = v?;
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn csv_rows(&self, splits: &[Split]) -> Vec<CsvRow> {
        self.trajectory
            .iter()
            .filter(|p| splits.contains(&p.split))
            .map(|p| CsvRow {
                method: self.method.clone(),
                seed: self.seed,
                cycle: p.cycle,
                institution: p.institution,
                split: p.split.name().to_string(),
                psnr: p.metrics.psnr,
                ssim: p.metrics.ssim,
                mse: p.metrics.mse,
                rho: p.rho,
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
