//! Reference methods run on the same data, initial weights, shuffling and
//! learning-rate schedule as the ring.

use std::time::Instant;

use crate::continual::TrainConfig;
use crate::data::InstitutionDataset;
use crate::nn::DenoiserModel;
use crate::tensor::{ParamVector, Tensor};

use super::local::{train_round, RoundKey};
use super::report::CorrectionStats;
use super::{
    initial_model, record_cycle, record_inputs, training_patches, validate_inputs, CentralMode, RunConfig, RunError,
    RunReport,
};

fn stats(cycle: u32, institution: u32) -> CorrectionStats {
    CorrectionStats {
        cycle,
        institution,
        steps: 0,
        projected_steps: 0,
        mean_l1_gap: 0.0,
    }
}

fn finish(mut report: RunReport, model: DenoiserModel, started: Instant) -> RunReport {
    report.final_digest = model.params().digest();
    report.final_params = Some(model.params().clone());
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    report
}

/// Fixed-order sequential fine-tuning: every institution trains `S`
/// site-rounds on the weights handed over by its predecessor, `T` times
/// around the ring.
pub fn run_sequential(cfg: &RunConfig, datasets: &[InstitutionDataset]) -> Result<RunReport, RunError> {
    let started = Instant::now();
    validate_inputs(cfg, datasets, 2)?;
    let tc = &cfg.train;
    let patches = datasets
        .iter()
        .map(|d| training_patches(tc, d))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = RunReport::new(
        "seq-ablation".into(),
        tc.seed,
        datasets.iter().map(|d| d.id()).collect(),
    );
    record_inputs(&mut report, datasets, tc)?;

    let mut model = initial_model(cfg);
    let mut global_round = 0;
    for cycle in 0..tc.transmissions {
        for p in &patches {
            if !tc.fine_tune && (cycle, p.institution) != (0, patches[0].institution) {
                let seed = crate::data::splitmix64(tc.seed ^ (u64::from(p.institution) << 32) ^ u64::from(cycle));
                model = DenoiserModel::new(cfg.arch, seed);
            }
            let mut st = stats(cycle + 1, p.institution);
            for round in 0..tc.site_rounds {
                let key = RoundKey {
                    institution: p.institution,
                    cycle,
                    round,
                    global_round,
                };
                train_round(&mut model, &p.pairs, tc, &key, None, &mut st)?;
                global_round += 1;
            }
            report.corrections.push(st);
        }
        record_cycle(&mut report, &model, datasets, cycle + 1, tc, None)?;
    }
    Ok(finish(report, model, started))
}

/// Weighted parameter average, accumulated in double precision.
pub fn fedavg_average(models: &[(&ParamVector, f64)]) -> Result<ParamVector, RunError> {
    let Some((first, _)) = models.first() else {
        return Err(RunError::Average("no models"));
    };
    let total: f64 = models.iter().map(|m| m.1).sum();
    if !(total > 0.0) || models.iter().any(|m| !(m.1 >= 0.0)) {
        return Err(RunError::Average("weights must be non-negative with a positive sum"));
    }
    let mut acc = vec![0.0f64; first.len()];
    for (p, w) in models {
        if p.len() != acc.len() {
            return Err(RunError::Average("parameter vectors differ in length"));
        }
        for (a, &v) in acc.iter_mut().zip(p.as_slice()) {
            *a += w / total * f64::from(v);
        }
    }
    ParamVector::new(acc.into_iter().map(|v| v as f32).collect()).map_err(|_| RunError::Average("non-finite average"))
}

/// Federated averaging: `T * S` communication rounds, each institution runs
/// one site-round from the shared weights, the server averages weighted by
/// training patch count. Metrics are recorded every `S` rounds.
pub fn run_fedavg(cfg: &RunConfig, datasets: &[InstitutionDataset]) -> Result<RunReport, RunError> {
    let started = Instant::now();
    validate_inputs(cfg, datasets, 2)?;
    let tc = &cfg.train;
    let patches = datasets
        .iter()
        .map(|d| training_patches(tc, d))
        .collect::<Result<Vec<_>, _>>()?;
    let mut report = RunReport::new("fedavg".into(), tc.seed, datasets.iter().map(|d| d.id()).collect());
    record_inputs(&mut report, datasets, tc)?;

    let mut global = initial_model(cfg);
    let total_rounds = tc.transmissions * tc.site_rounds;
    for r in 0..total_rounds {
        let cycle = r / tc.site_rounds;
        let mut locals = Vec::with_capacity(patches.len());
        for p in &patches {
            let mut local = global.clone();
            let key = RoundKey {
                institution: p.institution,
                cycle,
                round: r % tc.site_rounds,
                global_round: r,
            };
            let mut st = stats(cycle + 1, p.institution);
            train_round(&mut local, &p.pairs, tc, &key, None, &mut st)?;
            report.corrections.push(st);
            locals.push((local.params().clone(), p.pairs.len() as f64));
            report.messages.model_packets += 2;
        }
        let weighted: Vec<(&ParamVector, f64)> = locals.iter().map(|(p, w)| (p, *w)).collect();
        global.set_params(fedavg_average(&weighted)?)?;
        if (r + 1) % tc.site_rounds == 0 {
            record_cycle(&mut report, &global, datasets, cycle + 1, tc, None)?;
        }
    }
    Ok(finish(report, global, started))
}

/// Centralized training for `T * S` epochs on one institution's data or on
/// the pooled data of all, evaluated every `S` epochs on every institution.
pub fn run_centralized(
    cfg: &RunConfig,
    datasets: &[InstitutionDataset],
    mode: CentralMode,
) -> Result<RunReport, RunError> {
    let started = Instant::now();
    validate_inputs(cfg, datasets, 1)?;
    let tc = &cfg.train;
    let (name, pairs): (String, Vec<(Tensor, Tensor)>) = match mode {
        CentralMode::Si(k) => {
            let d = datasets
                .iter()
                .find(|d| d.id() == k)
                .ok_or(RunError::UnknownInstitution(k))?;
            (format!("cl-si-{k}"), training_patches(tc, d)?.pairs)
        }
        CentralMode::Mi => {
            let mut pooled = Vec::new();
            for d in datasets {
                pooled.extend(training_patches(tc, d)?.pairs);
            }
            ("cl-mi".into(), pooled)
        }
    };
    let mut report = RunReport::new(name, tc.seed, datasets.iter().map(|d| d.id()).collect());
    record_inputs(&mut report, datasets, tc)?;
    // the per-round batch cap applies per institution, so a pooled epoch
    // keeps the same budget as one site-round at every institution
    let pooled_cfg;
    let tc = match (mode, tc.round_batches) {
        (CentralMode::Mi, Some(cap)) => {
            pooled_cfg = TrainConfig {
                round_batches: Some(cap * datasets.len()),
                ..tc.clone()
            };
            &pooled_cfg
        }
        _ => tc,
    };

    let mut model = initial_model(cfg);
    let epochs = tc.transmissions * tc.site_rounds;
    for e in 0..epochs {
        let cycle = e / tc.site_rounds;
        let key = RoundKey {
            institution: 0,
            cycle,
            round: e % tc.site_rounds,
            global_round: e,
        };
        let mut st = stats(cycle + 1, 0);
        train_round(&mut model, &pairs, tc, &key, None, &mut st)?;
        report.corrections.push(st);
        if (e + 1) % tc.site_rounds == 0 {
            record_cycle(&mut report, &model, datasets, cycle + 1, tc, None)?;
        }
    }
    Ok(finish(report, model, started))
}
