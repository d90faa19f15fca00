use std::collections::BTreeMap;

use icp2p_core::continual::TrainConfig;
use icp2p_core::controller::{
    fallback_score, odm_decide, odm_triggers, pam_pretrain, pam_score, ControlDirective, PamMlp, PretrainOptions,
    PAM_WIDTHS,
};
use icp2p_core::metrics::MetricVector;
use icp2p_core::ParamVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mv(psnr: f64, ssim: f64, mse: f64) -> MetricVector {
    MetricVector { psnr, ssim, mse }
}

fn pinned_weights() -> Vec<f32> {
    (0..PamMlp::param_count())
        .map(|j| (0.5 * (0.37 * (j + 1) as f64).sin()) as f32)
        .collect()
}

/// Straight matrix-vector evaluation of the pinned network.
fn reference_forward(w: &[f32], x: [f64; 3]) -> f64 {
    let mut act = x.to_vec();
    let mut offset = 0;
    for (li, pair) in PAM_WIDTHS.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let mut next = vec![0.0; fan_out];
        for (o, slot) in next.iter_mut().enumerate() {
            let mut z = f64::from(w[offset + fan_in * fan_out + o]);
            for i in 0..fan_in {
                z += f64::from(w[offset + o * fan_in + i]) * act[i];
            }
            *slot = if li + 2 < PAM_WIDTHS.len() { z.max(0.0) } else { z };
        }
        offset += fan_in * fan_out + fan_out;
        act = next;
    }
    act[0]
}

#[test]
fn pinned_pam_regression_value() {
    let pam = PamMlp::from_params(&ParamVector::new(pinned_weights()).unwrap()).unwrap();
    let rho = pam_score(&pam, &mv(40.0, 0.98, 1e-4)).unwrap();
    let oracle = reference_forward(&pinned_weights(), [40.0 / 60.0, 0.98, 1e-4 / 0.01]);
    assert!((rho - oracle).abs() < 1e-12, "{rho} vs {oracle}");
    assert!((rho - FROZEN_PINNED_SCORE).abs() < 1e-12, "{rho:.17}");
    assert_eq!(rho, pam_score(&pam, &mv(40.0, 0.98, 1e-4)).unwrap());
}

const FROZEN_PINNED_SCORE: f64 = 0.445_780_724_287_033_08;

fn calibration(seed: u64, n: usize) -> Vec<(MetricVector, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let m = mv(
                rng.gen_range(15.0..55.0),
                rng.gen_range(0.3..1.0),
                rng.gen_range(0.0..0.01),
            );
            (m, fallback_score(&m, 60.0).unwrap())
        })
        .collect()
}

/// Calibration design spanning the scored range, corners included.
fn calibration_grid(target: impl Fn(&MetricVector) -> f64) -> Vec<(MetricVector, f64)> {
    let mut out = Vec::new();
    for i in 0..6 {
        for j in 0..6 {
            for k in 0..4 {
                let m = mv(15.0 + 8.0 * i as f64, 0.3 + 0.14 * j as f64, 0.01 * k as f64 / 3.0);
                out.push((m, target(&m)));
            }
        }
    }
    out
}

#[test]
fn pretrained_pam_reproduces_fallback_on_held_out_points() {
    let cal = calibration_grid(|m| fallback_score(m, 60.0).unwrap());
    let fit = pam_pretrain(&cal, &PretrainOptions::default()).unwrap();
    assert!(fit.final_mse <= 1e-3);
    let mut worst = 0.0f64;
    for (m, target) in calibration(2, 64) {
        worst = worst.max((pam_score(&fit.pam, &m).unwrap() - target).abs());
    }
    assert!(worst < 0.02, "worst held-out error {worst} after {} steps", fit.steps);
}

#[test]
fn constant_targets_give_constant_predictions() {
    let cal = calibration_grid(|_| 0.8);
    let fit = pam_pretrain(&cal, &PretrainOptions::default()).unwrap();
    for (m, _) in calibration(4, 20) {
        assert!((pam_score(&fit.pam, &m).unwrap() - 0.8).abs() < 1e-2);
    }
}

#[test]
fn duplicated_calibration_set_is_deterministic() {
    let cal = calibration(5, 40);
    let doubled: Vec<_> = cal.iter().chain(cal.iter()).copied().collect();
    let a = pam_pretrain(&doubled, &PretrainOptions::default()).unwrap();
    let b = pam_pretrain(&doubled, &PretrainOptions::default()).unwrap();
    assert_eq!(a.pam.to_params(), b.pam.to_params());
}

#[test]
fn fallback_is_monotone_on_a_grid() {
    for pi in 0..40 {
        for si in 0..20 {
            for mi in 0..10 {
                let p = 10.0 + pi as f64 * 1.5;
                let s = si as f64 / 20.0;
                let m = mi as f64 * 1e-3;
                let base = fallback_score(&mv(p, s, m), 60.0).unwrap();
                assert!(fallback_score(&mv(p + 1.5, s, m), 60.0).unwrap() >= base);
                assert!(fallback_score(&mv(p, s + 0.05, m), 60.0).unwrap() >= base);
                assert!(fallback_score(&mv(p, s, m + 1e-3), 60.0).unwrap() <= base);
            }
        }
    }
}

fn arb_scores() -> impl Strategy<Value = (Vec<u32>, Vec<f64>)> {
    (2usize..7).prop_flat_map(|k| {
        (
            Just((1..=k as u32).collect::<Vec<_>>()).prop_shuffle(),
            prop::collection::vec(1.2f64..1.7, k),
        )
    })
}

proptest! {
    #[test]
    fn odm_returns_a_permutation_and_is_pure((ids, rhos) in arb_scores(), streak in 0u32..3) {
        let cfg = TrainConfig::default();
        let mut cur = ControlDirective::initial(ids.clone(), &cfg);
        cur.streak = streak;
        let scores: BTreeMap<u32, f64> = ids.iter().copied().zip(rhos.iter().copied()).collect();
        let out = odm_decide(&scores, &cfg, &cur).unwrap();
        let mut a = out.sequence.clone();
        let mut b = ids.clone();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(a, b);
        prop_assert_eq!(&out, &odm_decide(&scores, &cfg, &cur).unwrap());
        let triggered = odm_triggers(&scores, cfg.threshold);
        prop_assert_eq!(triggered, out.site_rounds.iter().any(|&s| s != cfg.site_rounds));
        if !triggered {
            prop_assert_eq!(&out.sequence, &cur.sequence);
            prop_assert!(!out.converged);
        }
    }
}
