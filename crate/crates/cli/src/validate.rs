//! Quick self-check of the core invariants, run by `icp2p validate`.

use std::collections::BTreeMap;

use icp2p_core::continual::{qp_project, ConstraintKind, GradientConstraintSet, TrainConfig};
use icp2p_core::controller::{odm_decide, odm_triggers, ControlDirective};
use icp2p_core::data::{InstitutionDataset, ProtocolParams, SplitSizes};
use icp2p_core::metrics::{mse, mse_of, psnr_from_mse, ssim, MetricVector};
use icp2p_core::nn::shadow;
use icp2p_core::orchestrator::{run_icp2pfl, RunConfig, TransportKind};
use icp2p_core::proto::wire::{decode, encode, Message, ModelPacket, WireError, HEADER_LEN};
use icp2p_core::{Architecture, DenoiserModel, ParamVector, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, result: Result<String, String>) -> Check {
    match result {
        Ok(detail) => Check {
            name,
            passed: true,
            detail,
        },
        Err(detail) => Check {
            name,
            passed: false,
            detail,
        },
    }
}

fn image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    Tensor::image(h, w, (0..h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect()).unwrap()
}

fn gradient() -> Result<String, String> {
    let arch = Architecture::new(1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let values = (0..arch.param_count()).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
    let model = DenoiserModel::from_params(arch, ParamVector::new(values).unwrap()).map_err(|e| e.to_string())?;
    let (x, y) = (image(&mut rng, 8, 8), image(&mut rng, 8, 8));
    let p = model.shadow_params();
    let e = |err: icp2p_core::NnError| err.to_string();
    let (_, g) = shadow::gradient(&arch, &p, &x, &y).map_err(e)?;
    let base = shadow::relu_pattern(&arch, &p, &x).map_err(e)?;
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let mut h = 1e-3;
        let fd = loop {
            let (mut plus, mut minus) = (p.clone(), p.clone());
            plus[i] += h;
            minus[i] -= h;
            let smooth = shadow::relu_pattern(&arch, &plus, &x).map_err(e)? == base
                && shadow::relu_pattern(&arch, &minus, &x).map_err(e)? == base;
            if smooth || h < 1e-9 {
                let lp = shadow::loss(&arch, &plus, &x, &y).map_err(e)?;
                let lm = shadow::loss(&arch, &minus, &x, &y).map_err(e)?;
                break (lp - lm) / (2.0 * h);
            }
            h /= 10.0;
        };
        worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-8));
    }
    if worst < 1e-4 {
        Ok(format!("max relative error {worst:.1e} over {} coordinates", p.len()))
    } else {
        Err(format!("max relative error {worst:.1e}"))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn projection() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut projected = 0;
    for _ in 0..200 {
        let dim = rng.gen_range(2..=50);
        let n = rng.gen_range(1..=3);
        let g: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut set = GradientConstraintSet::new(dim);
        let mut rows = Vec::new();
        for kind in &ConstraintKind::ALL[..n] {
            let lean = rng.gen_range(-1.0..0.5);
            let row: Vec<f64> = g.iter().map(|v| lean * v + rng.gen_range(-1.0..1.0)).collect();
            set.set_f64(*kind, row.clone()).map_err(|e| e.to_string())?;
            rows.push(row);
        }
        let p = qp_project(&g, &set).map_err(|e| e.to_string())?;
        if let Some(slack) = rows.iter().map(|r| dot(&p.value, r)).find(|&d| d < -1e-8) {
            return Err(format!("constraint slack {slack:e}"));
        }
        let again = qp_project(&p.value, &set).map_err(|e| e.to_string())?;
        if rows.iter().all(|r| dot(&p.value, r) >= 0.0) && (!again.unchanged || again.value != p.value) {
            return Err("feasible input was modified".into());
        }
        projected += usize::from(!p.unchanged);
    }
    Ok(format!("200 instances, {projected} projected"))
}

fn metrics() -> Result<String, String> {
    let zeros = vec![0.0f64; 64];
    let tenth = vec![0.1f64; 64];
    let p = psnr_from_mse(mse_of(&zeros, &tenth).map_err(|e| e.to_string())?, 1.0);
    if p != 20.0 {
        return Err(format!("PSNR of a 0.1 offset is {p}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (a, b) = (image(&mut rng, 16, 16), image(&mut rng, 16, 16));
    let s = ssim(&a, &a, 1.0).map_err(|e| e.to_string())?;
    if s != 1.0 {
        return Err(format!("SSIM(a, a) = {s}"));
    }
    let (ab, ba) = (
        mse(&a, &b).map_err(|e| e.to_string())?,
        mse(&b, &a).map_err(|e| e.to_string())?,
    );
    if mse(&a, &a) != Ok(0.0) || ab != ba {
        return Err("MSE identities violated".into());
    }
    Ok("PSNR 20 dB, SSIM 1, MSE identities".into())
}

fn wire() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let n = rng.gen_range(1..32);
        let mut sequence: Vec<u32> = (1..=3).collect();
        sequence.shuffle(&mut rng);
        let msg = Message::Model(ModelPacket {
            sender: rng.gen(),
            cycle: rng.gen(),
            site_rounds: rng.gen(),
            metrics: MetricVector {
                psnr: rng.gen_range(0.0..60.0),
                ssim: rng.gen_range(0.0..1.0),
                mse: rng.gen_range(0.0..1.0),
            },
            params: ParamVector::new((0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap(),
            g_prev: None,
            directive: rng.gen::<bool>().then(|| ControlDirective {
                sequence,
                site_rounds: vec![1, 2, 3],
                trans_rounds: 4,
                streak: 0,
                converged: false,
            }),
        });
        let bytes = encode(&msg).map_err(|e| e.to_string())?;
        if decode(&bytes).as_ref() != Ok(&msg) {
            return Err("message did not round-trip".into());
        }
        let mut flipped = bytes.clone();
        let at = rng.gen_range(HEADER_LEN..bytes.len() - 4);
        flipped[at] ^= 1 << rng.gen_range(0..8);
        if !matches!(decode(&flipped), Err(WireError::CrcMismatch { .. })) {
            return Err("bit flip went undetected".into());
        }
        let garbage: Vec<u8> = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
        let _ = decode(&garbage);
    }
    Ok("200 round-trips and bit flips".into())
}

fn controller() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = TrainConfig::default();
    let mut triggered = 0;
    for _ in 0..1000 {
        let k = rng.gen_range(2..7u32);
        let mut ids: Vec<u32> = (1..=k).collect();
        ids.shuffle(&mut rng);
        let scores: BTreeMap<u32, f64> = ids.iter().map(|&i| (i, rng.gen_range(1.2..1.7))).collect();
        let cur = ControlDirective::initial(ids.clone(), &cfg);
        let out = odm_decide(&scores, &cfg, &cur).map_err(|e| e.to_string())?;
        let mut seq = out.sequence.clone();
        seq.sort_unstable();
        if seq != (1..=k).collect::<Vec<_>>() {
            return Err("not a permutation".into());
        }
        let acted = out.site_rounds.iter().any(|&s| s != cfg.site_rounds);
        if acted != odm_triggers(&scores, cfg.threshold) {
            return Err("trigger disagrees with threshold".into());
        }
        triggered += usize::from(acted);
    }
    Ok(format!("1000 sweeps, {triggered} triggered"))
}

fn ring() -> Result<String, String> {
    let sizes = SplitSizes {
        train: 2,
        test: 1,
        characteristic: 1,
        image_size: 32,
    };
    let data: Vec<InstitutionDataset> = (1..=3)
        .map(|k| InstitutionDataset::generate(ProtocolParams::preset(k), sizes, 7))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let train = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 4,
        transmissions: 2,
        site_rounds: 1,
        patch: 16,
        stride: 16,
        ..TrainConfig::default()
    };
    let mut cfg = RunConfig::new(train, Architecture::new(1, 4));
    let a = run_icp2pfl(&cfg, &data).map_err(|e| e.to_string())?;
    cfg.transport = TransportKind::Socket(Vec::new());
    let b = run_icp2pfl(&cfg, &data).map_err(|e| e.to_string())?;
    let agree = |r: &icp2p_core::orchestrator::RunReport| r.node_digests.values().all(|d| *d == r.final_digest);
    if !agree(&a) || !agree(&b) {
        return Err("nodes disagree on the final weights".into());
    }
    if a.final_digest != b.final_digest || a.transcript != b.transcript {
        return Err("transports disagree".into());
    }
    Ok(format!("K=3 on both transports, {} packets", a.messages.model_packets))
}

pub fn run_checks() -> Vec<Check> {
    vec![
        check("gradient vs finite differences", gradient()),
        check("projection feasibility", projection()),
        check("metric identities", metrics()),
        check("wire framing", wire()),
        check("controller decisions", controller()),
        check("ring agreement", ring()),
    ]
}
