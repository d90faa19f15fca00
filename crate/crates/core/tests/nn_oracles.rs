use icp2p_core::nn::shadow;
use icp2p_core::{Architecture, DenoiserModel, ParamVector, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_model(arch: Architecture, seed: u64, scale: f32) -> DenoiserModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..arch.param_count()).map(|_| rng.gen_range(-scale..scale)).collect();
    DenoiserModel::from_params(arch, ParamVector::new(values).unwrap()).unwrap()
}

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::image(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

/// Straightforward per-pixel convolution, written independently of the
/// padded-plane kernels.
fn naive_conv(
    input: &[Vec<f64>],
    h: usize,
    w: usize,
    params: &[f64],
    offset: &mut usize,
    cout: usize,
) -> Vec<Vec<f64>> {
    let cin = input.len();
    let weights = &params[*offset..*offset + cout * cin * 9];
    let bias = &params[*offset + cout * cin * 9..*offset + cout * cin * 9 + cout];
    *offset += cout * cin * 9 + cout;
    (0..cout)
        .map(|co| {
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for (ci, plane) in input.iter().enumerate() {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let (sy, sx) = (y + ky, x + kx);
                                if sy == 0 || sx == 0 || sy > h || sx > w {
                                    continue;
                                }
                                acc += weights[co * cin * 9 + ci * 9 + ky * 3 + kx] * plane[(sy - 1) * w + (sx - 1)];
                            }
                        }
                    }
                    out[y * w + x] = acc;
                }
            }
            out
        })
        .collect()
}

fn naive_forward(arch: &Architecture, params: &[f64], x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let relu = |planes: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        planes
            .into_iter()
            .map(|p| p.into_iter().map(|v| v.max(0.0)).collect())
            .collect()
    };
    let mut offset = 0;
    let mut hidden = relu(naive_conv(&[x.to_vec()], h, w, params, &mut offset, arch.channels));
    for _ in 0..arch.blocks {
        let a = relu(naive_conv(&hidden, h, w, params, &mut offset, arch.channels));
        let b = naive_conv(&a, h, w, params, &mut offset, arch.channels);
        hidden = hidden
            .iter()
            .zip(&b)
            .map(|(p, q)| p.iter().zip(q).map(|(u, v)| u + v).collect())
            .collect();
    }
    let tail = naive_conv(&hidden, h, w, params, &mut offset, 1).remove(0);
    assert_eq!(offset, params.len());
    if arch.global_residual {
        tail.iter().zip(x).map(|(r, v)| r + v).collect()
    } else {
        tail
    }
}

#[test]
fn forward_matches_naive_convolution_oracle() {
    for (arch, seed) in [
        (Architecture::new(2, 3), 7u64),
        (
            Architecture {
                blocks: 1,
                channels: 4,
                global_residual: false,
            },
            8,
        ),
        (Architecture::new(3, 16), 9),
    ] {
        let model = random_model(arch, seed, 0.3);
        let x = random_image(13, 9, seed + 100);
        let got = model.forward(&x).unwrap();
        let xs: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
        let expect = naive_forward(&arch, &model.shadow_params(), &xs, 13, 9);
        for (g, e) in got.data().iter().zip(&expect) {
            let tol = 1e-5 * (1.0 + e.abs());
            assert!((f64::from(*g) - e).abs() < tol, "{g} vs {e}");
        }
    }
}

/// Largest relative error between the analytic 64-bit gradient and central
/// differences. The step shrinks for any coordinate whose perturbation flips
/// a ReLU, so every difference is taken on a smooth segment.
pub fn max_fd_relative_error(arch: Architecture, model: &DenoiserModel, x: &Tensor, y: &Tensor) -> f64 {
    let params = model.shadow_params();
    let (_, grad) = shadow::gradient(&arch, &params, x, y).unwrap();
    let base = shadow::relu_pattern(&arch, &params, x).unwrap();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let mut h = 1e-3;
        let fd = loop {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[i] += h;
            minus[i] -= h;
            let stable = shadow::relu_pattern(&arch, &plus, x).unwrap() == base
                && shadow::relu_pattern(&arch, &minus, x).unwrap() == base;
            if stable || h < 1e-9 {
                let lp = shadow::loss(&arch, &plus, x, y).unwrap();
                let lm = shadow::loss(&arch, &minus, x, y).unwrap();
                break (lp - lm) / (2.0 * h);
            }
            h /= 10.0;
        };
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

#[test]
fn gradient_matches_central_differences_on_tiny_model() {
    let arch = Architecture::new(1, 2);
    let model = random_model(arch, 42, 0.5);
    let x = random_image(8, 8, 1);
    let y = random_image(8, 8, 2);
    let err = max_fd_relative_error(arch, &model, &x, &y);
    assert!(err < 1e-4, "max relative error {err}");
}

#[test]
fn f32_gradient_tracks_shadow_gradient() {
    let arch = Architecture::new(2, 4);
    let model = random_model(arch, 3, 0.4);
    let x = random_image(10, 10, 4);
    let y = random_image(10, 10, 5);
    let g32 = model.backward(&x, &y).unwrap();
    let (_, g64) = shadow::gradient(&arch, &model.shadow_params(), &x, &y).unwrap();
    let scale = g64.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for (a, b) in g32.as_slice().iter().zip(&g64) {
        assert!((f64::from(*a) - b).abs() < 1e-4 * scale);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn fd_agreement_for_any_seed(seed in 0u64..10_000) {
        let arch = Architecture::new(1, 2);
        let model = random_model(arch, seed, 0.5);
        let x = random_image(8, 8, seed ^ 0xabc);
        let y = random_image(8, 8, seed ^ 0xdef);
        prop_assert!(max_fd_relative_error(arch, &model, &x, &y) < 1e-4);
    }
}
