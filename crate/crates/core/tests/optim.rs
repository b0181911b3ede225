mod common;

use common::{randn, rng};
use csnet_core::optim::*;
use csnet_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn channel_metric_examples() {
    let mut t = Tensor::zeros(&[2, 3, 4, 4]);
    assert_eq!(channel_metric(&t).unwrap(), vec![0.0; 3]);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = [-0.7, 0.2, 1.5][(i / 16) % 3];
    }
    let s = channel_metric(&t).unwrap();
    for (a, b) in s.iter().zip([0.7, 0.2, 1.5]) {
        assert!((a - b).abs() < 1e-15);
    }
    let signed = channel_metric_with(&t, MetricSign::Signed).unwrap();
    assert!((signed[0] + 0.7).abs() < 1e-15);
}

#[test]
fn channel_metric_matches_loop_oracle() {
    let x = randn(&[4, 3, 5, 5], &mut rng(1));
    let got = channel_metric(&x).unwrap();
    for c in 0..3 {
        let mut acc = 0.0;
        for n in 0..4 {
            let mut gap = 0.0;
            for i in 0..25 {
                gap += x.data()[(n * 3 + c) * 25 + i];
            }
            acc += (gap / 25.0).abs();
        }
        assert!((got[c] - acc / 4.0).abs() < 1e-12);
    }
}

#[test]
fn standard_decay_examples() {
    let mut w = vec![2.0];
    standard_decay_step(&mut w, &[0.0], 1.0, 0.1).unwrap();
    assert!((w[0] - 1.8).abs() < 1e-15);

    let mut r = rng(2);
    let w0: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();
    let g: Vec<f64> = (0..20).map(|_| r.gen_range(-1.0..1.0)).collect();
    let (lr, lam) = (r.gen_range(0.0..0.1), r.gen_range(0.0..0.1));
    let mut w = w0.clone();
    standard_decay_step(&mut w, &g, lr, lam).unwrap();
    for i in 0..20 {
        assert!((w[i] - (w0[i] - lr * g[i] - lr * lam * w0[i])).abs() < 1e-15);
    }
    let mut plain = w0.clone();
    standard_decay_step(&mut plain, &g, lr, 0.0).unwrap();
    for i in 0..20 {
        assert_eq!(plain[i], w0[i] - lr * g[i]);
    }
    assert!(standard_decay_step(&mut plain, &g[..3], lr, lam).is_err());
}

#[test]
fn dynamic_decay_examples() {
    let mut w = vec![1.0];
    dynamic_decay_step(&mut w, &[0.0], 1.0, 3.0, &[0.5]).unwrap();
    assert!((w[0] + 0.5).abs() < 1e-15);

    let w0 = vec![0.3, -0.2, 0.9, 0.4];
    let g = vec![0.1, 0.2, -0.3, 0.05];
    let mut a = w0.clone();
    let mut b = w0.clone();
    let mut c = w0.clone();
    dynamic_decay_step(&mut a, &g, 0.1, 3.0, &[0.0, 0.0]).unwrap();
    dynamic_decay_step(&mut b, &g, 0.1, 0.0, &[0.4, 0.9]).unwrap();
    standard_decay_step(&mut c, &g, 0.1, 0.0).unwrap();
    assert_eq!(a, c);
    assert_eq!(b, c);
    assert!(dynamic_decay_step(&mut a, &g, 0.1, 3.0, &[0.1; 3]).is_err());
}

proptest! {
    #[test]
    fn dynamic_reduces_to_standard_when_metric_is_ratio(
        w0 in -2.0f64..2.0, g in -1.0f64..1.0, lr in 1e-4f64..0.5,
        lam in 1e-4f64..0.1, lam_d in 0.1f64..10.0,
    ) {
        let mut a = vec![w0];
        let mut b = vec![w0];
        standard_decay_step(&mut a, &[g], lr, lam).unwrap();
        dynamic_decay_step(&mut b, &[g], lr, lam_d, &[lam / lam_d]).unwrap();
        prop_assert!((a[0] - b[0]).abs() < 1e-14);
    }

    #[test]
    fn larger_metric_means_larger_decay(
        w0 in 0.01f64..2.0, g in -1.0f64..1.0, s1 in 0.0f64..1.0, ds in 1e-3f64..1.0,
    ) {
        let mut a = vec![w0, w0];
        dynamic_decay_step(&mut a, &[g, g], 0.01, 3.0, &[s1, s1 + ds]).unwrap();
        // identical gradient term, so the gap comes from decay alone
        prop_assert!(a[1] < a[0]);
    }
}

/// Independent scalar Adam.
fn adam_scalar(w0: f64, grads: &[f64], lr: f64) -> Vec<f64> {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut w) = (0.0, 0.0, w0);
    let mut out = Vec::new();
    for (i, g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        w -= lr * mh / (vh.sqrt() + eps);
        out.push(w);
    }
    out
}

#[test]
fn adam_matches_scalar_trace() {
    let mut r = rng(3);
    let grads: Vec<f64> = (0..10).map(|_| r.gen_range(-1.0..1.0)).collect();
    let want = adam_scalar(0.7, &grads, 1e-2);
    let cfg = AdamConfig::default();
    let mut st = AdamState::new(1);
    let mut w = vec![0.7];
    for (g, wt) in grads.iter().zip(&want) {
        adam_step(&mut st, &mut w, &[*g], 1e-2, &cfg).unwrap();
        assert!((w[0] - wt).abs() < 1e-12);
    }
}

#[test]
fn adam_limits() {
    let cfg = AdamConfig::default();
    let mut st = AdamState::new(1);
    let mut w = vec![0.0];
    let mut prev = 0.0;
    for _ in 0..2000 {
        adam_step(&mut st, &mut w, &[0.3], 1e-3, &cfg).unwrap();
        let step = w[0] - prev;
        prev = w[0];
        assert!((step + 1e-3).abs() < 1e-9);
    }
    let mut st = AdamState::new(3);
    let mut w = vec![1.0, -2.0, 3.0];
    adam_step(&mut st, &mut w, &[0.0; 3], 1e-3, &cfg).unwrap();
    assert_eq!(w, vec![1.0, -2.0, 3.0]);
}

#[test]
fn optimizer_routes_each_parameter_to_one_regime() {
    let lr = 1e-2;
    let policy = DecayPolicy {
        max_decay: None,
        standard_coupling: DecayCoupling::LrScaled,
        dynamic_coupling: DecayCoupling::LrScaled,
        ..DecayPolicy::dynamic(0.05, 3.0, ["b.gamma".to_string()])
    };
    let mut opt = Optimizer::new(AdamConfig::default(), policy);
    let g = [0.2, -0.1];
    let s = [0.5, 0.1];

    // a metric handed to a standard parameter is ignored
    let mut a = vec![1.0, 1.0];
    opt.update("a.weight", &mut a, &g, lr, Some(&s)).unwrap();
    let mut b = vec![1.0, 1.0];
    opt.update("b.gamma", &mut b, &g, lr, Some(&s)).unwrap();

    let mut sa = AdamState::new(2);
    let d = sa.direction(&g, &AdamConfig::default()).unwrap();
    for i in 0..2 {
        assert!((a[i] - (1.0 - lr * d[i] - lr * 0.05)).abs() < 1e-15);
        assert!((b[i] - (1.0 - lr * d[i] - lr * 3.0 * s[i])).abs() < 1e-15);
    }
    assert_eq!(opt.state("b.gamma").unwrap().t, 1);
    assert!(opt.update("b.gamma", &mut vec![0.0; 3], &[0.0; 3], lr, None).is_err());
}

#[test]
fn literal_coupling_ignores_lr_and_clamp_caps_it() {
    let p = DecayPolicy {
        dynamic_coupling: DecayCoupling::Literal,
        max_decay: Some(1.0),
        ..DecayPolicy::dynamic(5e-3, 3.0, ["x.gamma".to_string()])
    };
    assert_eq!(p.dynamic_coefficients(1e-4, &[0.1]), p.dynamic_coefficients(1.0, &[0.1]));
    assert_eq!(p.dynamic_coefficients(1e-4, &[10.0]), vec![1.0]);
    assert!((p.standard_coefficient(1e-4) - 5e-7).abs() < 1e-20);
}

#[test]
fn policy_validation() {
    let mut params = std::collections::BTreeMap::new();
    params.insert("bn.gamma".to_string(), Tensor::zeros(&[2]));
    params.insert("conv.w".to_string(), Tensor::zeros(&[2, 2, 1, 1]));
    assert!(DecayPolicy::dynamic(0.0, 3.0, ["bn.gamma".to_string()]).validate(&params).is_ok());
    assert!(DecayPolicy::dynamic(0.0, 3.0, ["conv.w".to_string()]).validate(&params).is_err());
    assert!(DecayPolicy::dynamic(0.0, 3.0, ["other.gamma".to_string()]).validate(&params).is_err());
    assert!(DecayPolicy::standard(-1.0).validate(&params).is_err());
}
