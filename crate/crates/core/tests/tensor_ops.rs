mod common;

use common::{conv_oracle, randn, rng, weighted_sum};
use csnet_core::gradcheck::{grad_check, grad_check_many};
use csnet_core::kernels::ConvParams;
use csnet_core::ops::{self, BatchNormParams};
use csnet_core::{Graph, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv_of_ones_sums_window() {
    let x = Tensor::ones(&[1, 1, 3, 3]);
    let w = Tensor::ones(&[1, 1, 3, 3]);
    let y = ops::conv2d(&x, &w, None, ConvParams::default()).unwrap();
    assert_eq!(y.shape(), &[1, 1, 1, 1]);
    assert_eq!(y.data()[0], 9.0);
}

#[test]
fn delta_kernel_is_identity() {
    let mut r = rng(1);
    let x = randn(&[2, 3, 6, 5], &mut r);
    for k in [1usize, 3, 5] {
        for dil in [1usize, 2] {
            let mut w = Tensor::zeros(&[3, 1, k, k]);
            for c in 0..3 {
                w.data_mut()[c * k * k + (k / 2) * k + k / 2] = 1.0;
            }
            let y = ops::conv2d(&x, &w, None, ConvParams::same(k, dil, 3)).unwrap();
            assert_eq!(y.max_abs_diff(&x), 0.0);
        }
    }
}

#[test]
fn depthwise_matches_direct_oracle() {
    let mut r = rng(2);
    let x = randn(&[2, 4, 8, 8], &mut r);
    let w = randn(&[4, 1, 3, 3], &mut r);
    let y = ops::conv2d(&x, &w, None, ConvParams::same(3, 1, 4)).unwrap();
    let o = conv_oracle(&x, &w, None, 1, 1, 1, 4);
    assert!(y.max_abs_diff(&o) < 1e-12);
}

#[test]
fn general_conv_matches_direct_oracle() {
    let mut r = rng(3);
    // (cin, cout, k, stride, pad, dil, groups)
    let cases = [
        (3, 5, 3, 2, 1, 1, 1),
        (4, 6, 3, 1, 2, 2, 2),
        (4, 4, 1, 1, 0, 1, 1),
        (6, 3, 3, 1, 1, 1, 3),
        (2, 2, 5, 2, 2, 1, 1),
        (4, 4, 3, 2, 4, 4, 4),
    ];
    for (cin, cout, k, s, p, d, g) in cases {
        let x = randn(&[2, cin, 9, 7], &mut r);
        let w = randn(&[cout, cin / g, k, k], &mut r);
        let b = randn(&[cout], &mut r);
        let params = ConvParams {
            stride: s,
            padding: p,
            dilation: d,
            groups: g,
        };
        let y = ops::conv2d(&x, &w, Some(&b), params).unwrap();
        let o = conv_oracle(&x, &w, Some(&b), s, p, d, g);
        assert_eq!(y.shape(), o.shape());
        assert!(y.max_abs_diff(&o) < 1e-12, "case {:?}", (cin, cout, k, s, p, d, g));
    }
}

#[test]
fn conv_shape_mismatch_is_config_error() {
    let x = Tensor::zeros(&[1, 3, 4, 4]);
    let w = Tensor::zeros(&[2, 2, 3, 3]);
    assert!(matches!(
        ops::conv2d(&x, &w, None, ConvParams::default()),
        Err(csnet_core::Error::Config(_))
    ));
}

#[test]
fn conv_non_finite_is_numeric_error() {
    let mut x = Tensor::zeros(&[1, 1, 3, 3]);
    x.data_mut()[4] = f64::INFINITY;
    let w = Tensor::ones(&[1, 1, 1, 1]);
    assert!(matches!(
        ops::conv2d(&x, &w, None, ConvParams::default()),
        Err(csnet_core::Error::Numeric(_))
    ));
}

#[test]
fn depthwise_perturbation_is_channel_local() {
    let mut r = rng(4);
    let x = randn(&[1, 5, 6, 6], &mut r);
    let w = randn(&[5, 1, 3, 3], &mut r);
    let p = ConvParams::same(3, 1, 5);
    let base = ops::conv2d(&x, &w, None, p).unwrap();
    for j in 0..5 {
        let mut xp = x.clone();
        for v in &mut xp.data_mut()[j * 36..(j + 1) * 36] {
            *v += 0.5;
        }
        let y = ops::conv2d(&xp, &w, None, p).unwrap();
        for c in 0..5 {
            let a = base.narrow_channels(c, 1).unwrap();
            let b = y.narrow_channels(c, 1).unwrap();
            let changed = a.max_abs_diff(&b) > 0.0;
            assert_eq!(changed, c == j, "channel {c} after perturbing {j}");
        }
    }
}

fn bn_oracle(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let mut out = x.clone();
    for ch in 0..c {
        let mut vals = Vec::new();
        for b in 0..n {
            for i in 0..h * w {
                vals.push(x.data()[(b * c + ch) * h * w + i]);
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for i in 0..h * w {
                let idx = (b * c + ch) * h * w + i;
                out.data_mut()[idx] = (x.data()[idx] - mean) / (var + eps).sqrt() * gamma[ch] + beta[ch];
            }
        }
    }
    out
}

#[test]
fn batch_norm_matches_statistics_oracle() {
    let mut r = rng(5);
    let x = randn(&[4, 3, 5, 5], &mut r).map(|v| 3.0 * v + 1.0);
    let mut p = BatchNormParams::new(3);
    p.gamma = vec![0.5, -1.2, 2.0];
    p.beta = vec![0.1, 0.0, -0.3];
    let y = ops::batch_norm(&x, &mut p, true).unwrap();
    let o = bn_oracle(&x, &[0.5, -1.2, 2.0], &[0.1, 0.0, -0.3], 1e-5);
    assert!(y.max_abs_diff(&o) < 1e-10);
    // running statistics moved toward the batch statistics
    assert!(p.running_mean.iter().all(|m| m.abs() > 0.0));
}

#[test]
fn batch_norm_of_standardized_input_is_near_identity() {
    let mut r = rng(6);
    let raw = randn(&[4, 2, 6, 6], &mut r);
    // exactly zero-mean, unit-variance per channel
    let o = bn_oracle(&raw, &[1.0, 1.0], &[0.0, 0.0], 0.0);
    let y = ops::batch_norm(&o, &mut BatchNormParams::new(2), true).unwrap();
    // eps shrinks every value by 1/sqrt(1 + eps)
    let shrink = 1.0 - 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in y.data().iter().zip(o.data()) {
        assert!((a - b).abs() <= shrink * b.abs() + 1e-12);
        if b.abs() <= 0.2 {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn batch_norm_zero_gamma_gives_constant_beta() {
    let mut r = rng(7);
    let x = randn(&[2, 3, 4, 4], &mut r);
    let mut p = BatchNormParams::new(3);
    p.gamma[1] = 0.0;
    p.beta[1] = 0.75;
    let y = ops::batch_norm(&x, &mut p, true).unwrap();
    let ch = y.narrow_channels(1, 1).unwrap();
    assert!(ch.data().iter().all(|&v| v == 0.75));
}

#[test]
fn batch_norm_training_output_is_standardized() {
    let mut r = rng(8);
    let x = randn(&[3, 4, 5, 5], &mut r).map(|v| 5.0 * v - 2.0);
    let y = ops::batch_norm(&x, &mut BatchNormParams::new(4), true).unwrap();
    let (n, c, h, w) = y.dims4().unwrap();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n)
            .flat_map(|b| y.data()[(b * c + ch) * h * w..][..h * w].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn batch_norm_inference_uses_running_stats() {
    let x = Tensor::full(&[1, 1, 2, 2], 3.0);
    let mut p = BatchNormParams::new(1);
    p.running_mean = vec![1.0];
    p.running_var = vec![4.0 - 1e-5];
    let y = ops::batch_norm(&x, &mut p, false).unwrap();
    assert!(y.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn batch_norm_empty_batch_rejected() {
    let x = Tensor::zeros(&[0, 2, 2, 2]);
    assert!(ops::batch_norm(&x, &mut BatchNormParams::new(2), true).is_err());
}

#[test]
fn prelu_examples() {
    let x = t(&[1, 2, 1, 2], &[1.0, 2.0, 0.0, 3.5]);
    assert_eq!(ops::prelu(&x, &[0.1, 0.2]).unwrap(), x);
    let x = t(&[1, 1, 1, 3], &[-2.0, 0.5, -1.0]);
    assert_eq!(ops::prelu(&x, &[1.0]).unwrap(), x);
    let y = ops::prelu(&t(&[1, 1, 1, 1], &[-2.0]), &[0.25]).unwrap();
    assert_eq!(y.data()[0], -0.5);
    assert!(ops::prelu(&x, &[0.1, 0.2]).is_err());
}

#[test]
fn pooling_examples() {
    let c = Tensor::full(&[1, 2, 4, 4], 1.7);
    assert_eq!(ops::avg_pool2(&c).unwrap(), Tensor::full(&[1, 2, 2, 2], 1.7));
    assert_eq!(ops::upsample_nearest(&c, 2).unwrap(), Tensor::full(&[1, 2, 8, 8], 1.7));
    let m = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(ops::avg_pool2(&m).unwrap().data(), &[2.5]);
    let mut r = rng(9);
    let x = randn(&[2, 3, 3, 5], &mut r);
    let back = ops::avg_pool2(&ops::upsample_nearest(&x, 2).unwrap()).unwrap();
    assert!(back.max_abs_diff(&x) < 1e-15);
    assert!(ops::avg_pool2(&Tensor::zeros(&[1, 1, 3, 2])).is_err());
}

#[test]
fn global_avg_pool_examples() {
    let m = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(ops::global_avg_pool(&m).unwrap().data(), &[2.5]);
    let c = Tensor::full(&[2, 3, 5, 4], -0.3);
    let g = ops::global_avg_pool(&c).unwrap();
    assert!(g.data().iter().all(|&v| (v + 0.3).abs() < 1e-15));

    let mut r = rng(10);
    let x = randn(&[1, 2, 7, 7], &mut r);
    let g = ops::global_avg_pool(&x).unwrap();
    for ch in 0..2 {
        let mut s = 0.0;
        for i in 0..49 {
            s += x.data()[ch * 49 + i];
        }
        assert!((g.data()[ch] - s / 49.0).abs() < 1e-12);
    }
}

// Gradient checks: every primitive at relative error < 1e-4, step 1e-5.

#[test]
fn grad_conv2d() {
    let mut r = rng(11);
    for (groups, stride, dil) in [(1, 1, 1), (2, 2, 1), (4, 1, 2), (1, 1, 1)] {
        let x = randn(&[2, 4, 6, 6], &mut r);
        let w = randn(&[4, 4 / groups, 3, 3], &mut r);
        let b = randn(&[4], &mut r);
        let p = ConvParams {
            stride,
            padding: dil,
            dilation: dil,
            groups,
        };
        let rep = grad_check_many(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), p)?;
                weighted_sum(g, y, 99)
            },
            &[x, w, b],
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }
    // pointwise fast path
    let x = randn(&[2, 5, 4, 3], &mut r);
    let w = randn(&[3, 5, 1, 1], &mut r);
    let rep = grad_check_many(
        |g, v| {
            let y = g.conv2d(v[0], v[1], None, ConvParams::default())?;
            weighted_sum(g, y, 98)
        },
        &[x, w],
        1e-5,
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "{rep:?}");
}

#[test]
fn grad_batch_norm_both_modes() {
    let mut r = rng(12);
    let x = randn(&[3, 2, 4, 4], &mut r);
    let gamma = randn(&[2], &mut r);
    let beta = randn(&[2], &mut r);
    for training in [true, false] {
        let rep = grad_check_many(
            |g, v| {
                let y = if training {
                    g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0
                } else {
                    g.batch_norm_eval(v[0], v[1], v[2], &[0.2, -0.1], &[1.5, 0.7], 1e-5)?
                };
                weighted_sum(g, y, 97)
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            1e-5,
            None,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-4, "training={training}: {rep:?}");
    }
}

#[test]
fn grad_prelu_pool_upsample_gap() {
    let mut r = rng(13);
    // keep inputs away from the PReLU kink
    let x = randn(&[2, 3, 4, 4], &mut r).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let slope = randn(&[3], &mut r);
    let rep = grad_check_many(
        |g, v| {
            let y = g.prelu(v[0], v[1])?;
            weighted_sum(g, y, 96)
        },
        &[x.clone(), slope],
        1e-5,
        None,
    )
    .unwrap();
    assert!(rep.max_rel_error < 1e-4, "prelu {rep:?}");

    let err = grad_check(
        |g, v| {
            let y = g.avg_pool2(v)?;
            weighted_sum(g, y, 95)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "pool {err}");

    let err = grad_check(
        |g, v| {
            let y = g.upsample_nearest(v, 4)?;
            weighted_sum(g, y, 94)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "upsample {err}");

    let err = grad_check(
        |g, v| {
            let y = g.global_avg_pool(v)?;
            weighted_sum(g, y, 93)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "gap {err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn avg_pool2_preserves_channel_mean(seed in 0u64..1000, h in 1usize..5, w in 1usize..5) {
        let x = randn(&[2, 3, 2 * h, 2 * w], &mut rng(seed));
        let before = ops::global_avg_pool(&x).unwrap();
        let after = ops::global_avg_pool(&ops::avg_pool2(&x).unwrap()).unwrap();
        prop_assert!(before.max_abs_diff(&after) < 1e-14);
    }

    #[test]
    fn conv_is_linear_in_input(seed in 0u64..1000, a in -2.0f64..2.0) {
        let mut r = rng(seed);
        let x = randn(&[1, 2, 5, 5], &mut r);
        let y = randn(&[1, 2, 5, 5], &mut r);
        let w = randn(&[3, 2, 3, 3], &mut r);
        let p = ConvParams::same(3, 1, 1);
        let mut g = Graph::new();
        let xs = g.constant(x.clone());
        let ys = g.constant(y.clone());
        let ax = g.scale(xs, a);
        let comb = g.add(ax, ys).unwrap();
        let combined = g.value(comb).clone();
        let lhs = ops::conv2d(&combined, &w, None, p).unwrap();
        let cx = ops::conv2d(&x, &w, None, p).unwrap();
        let cy = ops::conv2d(&y, &w, None, p).unwrap();
        let rhs = Tensor::from_fn(lhs.shape(), |i| a * cx.data()[i] + cy.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}
