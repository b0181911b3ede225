#![allow(dead_code)]

use csnet_core::model::TensorMap;
use csnet_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct convolution oracle: one nested loop per output coordinate.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
) -> Tensor {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, cin_g, k, _) = w.dims4().unwrap();
    let ho = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let wo = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let cout_g = cout / groups;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for b in 0..n {
        for co in 0..cout {
            let gi = co / cout_g;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                    for cj in 0..cin_g {
                        let ci = gi * cin_g + cj;
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * stride + kh * dil) as isize - pad as isize;
                                let iw = (ow * stride + kw * dil) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((b * cin + ci) * h + ih as usize) * wd + iw as usize];
                                let wv = w.data()[((co * cin_g + cj) * k + kh) * k + kw];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((b * cout + co) * ho + oh) * wo + ow] = acc;
                }
            }
        }
    }
    out
}

/// `sum(y * r)` for a fixed random `r`, so gradient checks see a generic
/// scalar objective instead of a plain sum.
pub fn weighted_sum(
    g: &mut csnet_core::Graph,
    y: csnet_core::Var,
    seed: u64,
) -> csnet_core::Result<csnet_core::Var> {
    let shape = g.shape(y).to_vec();
    let wts = g.constant(randn(&shape, &mut rng(seed)));
    let p = g.mul(y, wts)?;
    Ok(g.sum(p))
}

/// 2x2 mean pooling written out per output pixel.
pub fn pool_oracle(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let mut out = Tensor::zeros(&[n, c, h / 2, w / 2]);
    for p in 0..n * c {
        for i in 0..h / 2 {
            for j in 0..w / 2 {
                let at = |a: usize, b: usize| x.data()[(p * h + a) * w + b];
                let s = at(2 * i, 2 * j) + at(2 * i + 1, 2 * j) + at(2 * i, 2 * j + 1) + at(2 * i + 1, 2 * j + 1);
                out.data_mut()[(p * (h / 2) + i) * (w / 2) + j] = s / 4.0;
            }
        }
    }
    out
}

/// Nearest-neighbour upsampling by integer division of coordinates.
pub fn upsample_oracle(x: &Tensor, f: usize) -> Tensor {
    let (n, c, h, w) = x.dims4().unwrap();
    let (ho, wo) = (h * f, w * f);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for p in 0..n * c {
        for i in 0..ho {
            for j in 0..wo {
                out.data_mut()[(p * ho + i) * wo + j] = x.data()[(p * h + i / f) * w + j / f];
            }
        }
    }
    out
}

pub fn add_oracle(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

/// Random BatchNorm affine parameters and running statistics, so that no
/// layer sits at its identity initialisation.
pub fn perturb_bn(params: &mut TensorMap, buffers: &mut TensorMap, r: &mut ChaCha8Rng) {
    for (k, t) in params.iter_mut() {
        if k.ends_with(".gamma") {
            *t = Tensor::from_fn(t.shape(), |_| r.gen_range(0.5..1.5));
        } else if k.ends_with(".beta") {
            *t = Tensor::from_fn(t.shape(), |_| r.gen_range(-0.5..0.5));
        }
    }
    for (k, t) in buffers.iter_mut() {
        if k.ends_with(".running_mean") {
            *t = Tensor::from_fn(t.shape(), |_| r.gen_range(-0.2..0.2));
        } else if k.ends_with(".running_var") {
            *t = Tensor::from_fn(t.shape(), |_| r.gen_range(0.5..2.0));
        }
    }
}
