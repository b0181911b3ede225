//! Slice-level forward and backward kernels. Everything here works on raw
//! `[N, C, H, W]` buffers; shape checking happens in the callers.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvParams {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        ConvParams {
            stride: 1,
            padding: dilation * (kernel / 2),
            dilation,
            groups,
        }
    }
}

pub fn conv_out_len(len: usize, kernel: usize, p: &ConvParams) -> Result<usize> {
    let span = p.dilation * (kernel - 1) + 1;
    let padded = len + 2 * p.padding;
    if padded < span {
        return Err(config_err!(
            "kernel span {span} exceeds padded input length {padded}"
        ));
    }
    Ok((padded - span) / p.stride + 1)
}

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub ho: usize,
    pub wo: usize,
    pub p: ConvParams,
}

impl ConvShape {
    pub fn new(
        input: (usize, usize, usize, usize),
        cout: usize,
        kernel: usize,
        p: ConvParams,
    ) -> Result<Self> {
        let (n, cin, h, w) = input;
        if kernel == 0 || p.stride == 0 || p.dilation == 0 || p.groups == 0 {
            return Err(config_err!(
                "kernel, stride, dilation and groups must be >= 1 (got k={kernel}, {p:?})"
            ));
        }
        if cin % p.groups != 0 || cout % p.groups != 0 {
            return Err(config_err!(
                "channels {cin}->{cout} not divisible by groups {}",
                p.groups
            ));
        }
        Ok(ConvShape {
            n,
            cin,
            h,
            w,
            cout,
            k: kernel,
            ho: conv_out_len(h, kernel, &p)?,
            wo: conv_out_len(w, kernel, &p)?,
            p,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.p.stride == 1 && self.p.padding == 0 && self.p.groups == 1
    }

    fn is_depthwise(&self) -> bool {
        self.p.groups == self.cin && self.cin == self.cout
    }

    pub fn out_len(&self) -> usize {
        self.n * self.cout * self.ho * self.wo
    }

    /// Multiply-accumulates of the forward pass.
    pub fn macs(&self) -> u64 {
        (self.out_len() * self.k * self.k * (self.cin / self.p.groups)) as u64
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the strides describe dense m*k, k*n and m*n row-major blocks
    // that lie within the asserted slice lengths.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Range of output positions `o` with `o * stride + offset` inside `[0, len)`.
#[inline]
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { (-offset + s - 1) / s } else { 0 };
    let hi = if (len as isize) <= offset {
        0
    } else {
        ((len as isize - offset + s - 1) / s).min(out_len as isize)
    };
    (lo as usize, hi.max(lo) as usize)
}

pub fn conv2d_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    s: &ConvShape,
) -> Vec<f64> {
    let mut out = vec![0.0; s.out_len()];
    if s.is_pointwise() {
        let plane = s.h * s.w;
        for b in 0..s.n {
            let xb = &x[b * s.cin * plane..(b + 1) * s.cin * plane];
            let ob = &mut out[b * s.cout * plane..(b + 1) * s.cout * plane];
            gemm(s.cout, s.cin, plane, weight, false, xb, false, 0.0, ob);
        }
    } else if s.is_depthwise() {
        depthwise_forward(x, weight, &mut out, s);
    } else {
        general_forward(x, weight, &mut out, s);
    }
    if let Some(bias) = bias {
        let plane = s.ho * s.wo;
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            let bv = bias[i % s.cout];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    s: &ConvShape,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let mut gx = need_input.then(|| vec![0.0; x.len()]);
    let mut gw = need_weight.then(|| vec![0.0; weight.len()]);
    if need_input || need_weight {
        if s.is_pointwise() {
            let plane = s.h * s.w;
            for b in 0..s.n {
                let xs = b * s.cin * plane..(b + 1) * s.cin * plane;
                let g = &grad_out[b * s.cout * plane..(b + 1) * s.cout * plane];
                if let Some(gx) = gx.as_mut() {
                    gemm(s.cin, s.cout, plane, weight, true, g, false, 0.0, &mut gx[xs.clone()]);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(s.cout, plane, s.cin, g, false, &x[xs], true, 1.0, gw);
                }
            }
        } else if s.is_depthwise() {
            depthwise_backward(x, weight, grad_out, gx.as_deref_mut(), gw.as_deref_mut(), s);
        } else {
            general_backward(x, weight, grad_out, gx.as_deref_mut(), gw.as_deref_mut(), s);
        }
    }
    let gb = need_bias.then(|| {
        let plane = s.ho * s.wo;
        let mut gb = vec![0.0; s.cout];
        for (i, chunk) in grad_out.chunks(plane).enumerate() {
            gb[i % s.cout] += chunk.iter().sum::<f64>();
        }
        gb
    });
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

fn depthwise_forward(x: &[f64], weight: &[f64], out: &mut [f64], s: &ConvShape) {
    let (k, st, d, pad) = (s.k, s.p.stride, s.p.dilation as isize, s.p.padding as isize);
    let (in_plane, out_plane) = (s.h * s.w, s.ho * s.wo);
    for b in 0..s.n {
        for c in 0..s.cin {
            let xp = &x[(b * s.cin + c) * in_plane..][..in_plane];
            let op = &mut out[(b * s.cin + c) * out_plane..][..out_plane];
            let wk = &weight[c * k * k..(c + 1) * k * k];
            for kh in 0..k {
                let row_off = kh as isize * d - pad;
                let (oh0, oh1) = valid_range(row_off, st, s.h, s.ho);
                for kw in 0..k {
                    let wv = wk[kh * k + kw];
                    if wv == 0.0 {
                        continue;
                    }
                    let col_off = kw as isize * d - pad;
                    let (ow0, ow1) = valid_range(col_off, st, s.w, s.wo);
                    if ow0 >= ow1 {
                        continue;
                    }
                    for oh in oh0..oh1 {
                        let ih = (oh * st) as isize + row_off;
                        let xrow = &xp[ih as usize * s.w..][..s.w];
                        let orow = &mut op[oh * s.wo..][..s.wo];
                        if st == 1 {
                            let base = (ow0 as isize + col_off) as usize;
                            let src = &xrow[base..base + (ow1 - ow0)];
                            for (o, &xv) in orow[ow0..ow1].iter_mut().zip(src) {
                                *o += wv * xv;
                            }
                        } else {
                            for ow in ow0..ow1 {
                                let iw = ((ow * st) as isize + col_off) as usize;
                                orow[ow] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f64],
    weight: &[f64],
    g: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    s: &ConvShape,
) {
    let (k, st, d, pad) = (s.k, s.p.stride, s.p.dilation as isize, s.p.padding as isize);
    let (in_plane, out_plane) = (s.h * s.w, s.ho * s.wo);
    for b in 0..s.n {
        for c in 0..s.cin {
            let xoff = (b * s.cin + c) * in_plane;
            let xp = &x[xoff..xoff + in_plane];
            let gp = &g[(b * s.cin + c) * out_plane..][..out_plane];
            for kh in 0..k {
                let row_off = kh as isize * d - pad;
                let (oh0, oh1) = valid_range(row_off, st, s.h, s.ho);
                for kw in 0..k {
                    let widx = c * k * k + kh * k + kw;
                    let wv = weight[widx];
                    let col_off = kw as isize * d - pad;
                    let (ow0, ow1) = valid_range(col_off, st, s.w, s.wo);
                    if ow0 >= ow1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oh in oh0..oh1 {
                        let ih = ((oh * st) as isize + row_off) as usize;
                        let grow = &gp[oh * s.wo..][..s.wo];
                        if st == 1 {
                            let base = (ow0 as isize + col_off) as usize;
                            let len = ow1 - ow0;
                            if gw.is_some() {
                                let xrow = &xp[ih * s.w + base..][..len];
                                acc += grow[ow0..ow1]
                                    .iter()
                                    .zip(xrow)
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            }
                            if let Some(gx) = gx.as_deref_mut() {
                                let dst = &mut gx[xoff + ih * s.w + base..][..len];
                                for (dv, &gv) in dst.iter_mut().zip(&grow[ow0..ow1]) {
                                    *dv += wv * gv;
                                }
                            }
                        } else {
                            for ow in ow0..ow1 {
                                let iw = ((ow * st) as isize + col_off) as usize;
                                acc += grow[ow] * xp[ih * s.w + iw];
                                if let Some(gx) = gx.as_deref_mut() {
                                    gx[xoff + ih * s.w + iw] += wv * grow[ow];
                                }
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}

fn im2col(xg: &[f64], cin_g: usize, s: &ConvShape, col: &mut [f64]) {
    let (k, st, d, pad) = (s.k, s.p.stride, s.p.dilation as isize, s.p.padding as isize);
    let out_plane = s.ho * s.wo;
    col.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..cin_g {
        let xp = &xg[ci * s.h * s.w..][..s.h * s.w];
        for kh in 0..k {
            let row_off = kh as isize * d - pad;
            let (oh0, oh1) = valid_range(row_off, st, s.h, s.ho);
            for kw in 0..k {
                let col_off = kw as isize * d - pad;
                let (ow0, ow1) = valid_range(col_off, st, s.w, s.wo);
                let row = &mut col[((ci * k + kh) * k + kw) * out_plane..][..out_plane];
                for oh in oh0..oh1 {
                    let ih = ((oh * st) as isize + row_off) as usize;
                    for ow in ow0..ow1 {
                        let iw = ((ow * st) as isize + col_off) as usize;
                        row[oh * s.wo + ow] = xp[ih * s.w + iw];
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], cin_g: usize, s: &ConvShape, gxg: &mut [f64]) {
    let (k, st, d, pad) = (s.k, s.p.stride, s.p.dilation as isize, s.p.padding as isize);
    let out_plane = s.ho * s.wo;
    for ci in 0..cin_g {
        let gp = &mut gxg[ci * s.h * s.w..][..s.h * s.w];
        for kh in 0..k {
            let row_off = kh as isize * d - pad;
            let (oh0, oh1) = valid_range(row_off, st, s.h, s.ho);
            for kw in 0..k {
                let col_off = kw as isize * d - pad;
                let (ow0, ow1) = valid_range(col_off, st, s.w, s.wo);
                let row = &col[((ci * k + kh) * k + kw) * out_plane..][..out_plane];
                for oh in oh0..oh1 {
                    let ih = ((oh * st) as isize + row_off) as usize;
                    for ow in ow0..ow1 {
                        let iw = ((ow * st) as isize + col_off) as usize;
                        gp[ih * s.w + iw] += row[oh * s.wo + ow];
                    }
                }
            }
        }
    }
}

fn general_forward(x: &[f64], weight: &[f64], out: &mut [f64], s: &ConvShape) {
    let g = s.p.groups;
    let (cin_g, cout_g) = (s.cin / g, s.cout / g);
    let kk = s.k * s.k;
    let out_plane = s.ho * s.wo;
    let mut col = vec![0.0; cin_g * kk * out_plane];
    for b in 0..s.n {
        for gi in 0..g {
            let xg = &x[(b * s.cin + gi * cin_g) * s.h * s.w..][..cin_g * s.h * s.w];
            im2col(xg, cin_g, s, &mut col);
            let wg = &weight[gi * cout_g * cin_g * kk..][..cout_g * cin_g * kk];
            let og = &mut out[(b * s.cout + gi * cout_g) * out_plane..][..cout_g * out_plane];
            gemm(cout_g, cin_g * kk, out_plane, wg, false, &col, false, 0.0, og);
        }
    }
}

fn general_backward(
    x: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    s: &ConvShape,
) {
    let g = s.p.groups;
    let (cin_g, cout_g) = (s.cin / g, s.cout / g);
    let kk = s.k * s.k;
    let out_plane = s.ho * s.wo;
    let mut col = vec![0.0; cin_g * kk * out_plane];
    let mut dcol = vec![0.0; cin_g * kk * out_plane];
    for b in 0..s.n {
        for gi in 0..g {
            let xoff = (b * s.cin + gi * cin_g) * s.h * s.w;
            let gog = &grad_out[(b * s.cout + gi * cout_g) * out_plane..][..cout_g * out_plane];
            let wg = &weight[gi * cout_g * cin_g * kk..][..cout_g * cin_g * kk];
            if let Some(gw) = gw.as_deref_mut() {
                im2col(&x[xoff..xoff + cin_g * s.h * s.w], cin_g, s, &mut col);
                let gwg = &mut gw[gi * cout_g * cin_g * kk..][..cout_g * cin_g * kk];
                gemm(cout_g, out_plane, cin_g * kk, gog, false, &col, true, 1.0, gwg);
            }
            if let Some(gx) = gx.as_deref_mut() {
                gemm(cin_g * kk, cout_g, out_plane, wg, true, gog, false, 0.0, &mut dcol);
                col2im(&dcol, cin_g, s, &mut gx[xoff..xoff + cin_g * s.h * s.w]);
            }
        }
    }
}

/// Per-channel mean and biased variance over `N, H, W`.
pub fn channel_stats(x: &[f64], n: usize, c: usize, plane: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += x[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for b in 0..n {
            v += x[(b * c + ch) * plane..][..plane]
                .iter()
                .map(|&t| (t - mu) * (t - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = v / m;
    }
    (mean, var)
}

pub fn avg_pool2_forward(x: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        let xp = &x[p * h * w..][..h * w];
        let op = &mut out[p * ho * wo..][..ho * wo];
        for oh in 0..ho {
            let r0 = &xp[2 * oh * w..][..w];
            let r1 = &xp[(2 * oh + 1) * w..][..w];
            for ow in 0..wo {
                op[oh * wo + ow] =
                    0.25 * (r0[2 * ow] + r0[2 * ow + 1] + r1[2 * ow] + r1[2 * ow + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(g: &[f64], nc: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut gx = vec![0.0; nc * h * w];
    for p in 0..nc {
        let gp = &g[p * ho * wo..][..ho * wo];
        let xp = &mut gx[p * h * w..][..h * w];
        for ih in 0..h {
            for iw in 0..w {
                xp[ih * w + iw] = 0.25 * gp[(ih / 2) * wo + iw / 2];
            }
        }
    }
    gx
}

pub fn upsample_forward(x: &[f64], nc: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        let xp = &x[p * h * w..][..h * w];
        let op = &mut out[p * ho * wo..][..ho * wo];
        for oh in 0..ho {
            let xr = &xp[(oh / f) * w..][..w];
            let orow = &mut op[oh * wo..][..wo];
            for (ow, o) in orow.iter_mut().enumerate() {
                *o = xr[ow / f];
            }
        }
    }
    out
}

pub fn upsample_backward(g: &[f64], nc: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let (ho, wo) = (h * f, w * f);
    let mut gx = vec![0.0; nc * h * w];
    for p in 0..nc {
        let gp = &g[p * ho * wo..][..ho * wo];
        let xp = &mut gx[p * h * w..][..h * w];
        for oh in 0..ho {
            let grow = &gp[oh * wo..][..wo];
            let xr = &mut xp[(oh / f) * w..][..w];
            for (ow, &gv) in grow.iter().enumerate() {
                xr[ow / f] += gv;
            }
        }
    }
    gx
}
