//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Each recorded node owns its value, an optional gradient buffer of the
//! same shape, and a `requires_grad` flag inherited from its inputs.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients.

use crate::error::{config_err, Error, Result};
use crate::kernels::{self, ConvParams, ConvShape};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Operation tally collected while a graph is built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Convolution multiply-accumulates.
    pub macs: u64,
    /// Output elements of BatchNorm, PReLU, pooling and upsampling.
    pub elementwise: u64,
}

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvShape,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    AvgPool2 {
        x: Var,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Add(Vec<Var>),
    Concat(Vec<Var>),
    Gap {
        x: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    BceLogits {
        logits: Var,
        target: Tensor,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Batch statistics observed by a training-mode BatchNorm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    counter: OpCounter,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> OpCounter {
        self.counter
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: true,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad: false,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dims4(&self, v: Var) -> Result<(usize, usize, usize, usize)> {
        self.nodes[v.0].value.dims4()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        let xd = self.dims4(x)?;
        let (cout, cin_g, kh, kw) = self.dims4(w)?;
        if kh != kw {
            return Err(config_err!("only square kernels are supported, got {kh}x{kw}"));
        }
        if p.groups == 0 || cin_g * p.groups != xd.1 {
            return Err(config_err!(
                "weight expects {} input channels per group x {} groups, input has {}",
                cin_g,
                p.groups,
                xd.1
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(config_err!("bias shape {:?} != [{cout}]", self.shape(b)));
            }
        }
        let shape = ConvShape::new(xd, cout, kh, p)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &shape,
        );
        let t = Tensor::new(vec![shape.n, cout, shape.ho, shape.wo], out)?;
        t.ensure_finite("conv2d output")?;
        self.counter.macs += shape.macs();
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(t, Op::Conv { x, w, b, shape }, &inputs))
    }

    fn check_channel_param(&self, x: Var, p: Var, what: &str) -> Result<usize> {
        let c = self.shape(x)[1];
        if self.shape(p) != [c] {
            return Err(config_err!(
                "{what} shape {:?} does not match {c} channels",
                self.shape(p)
            ));
        }
        Ok(c)
    }

    /// BatchNorm using the statistics of the current batch.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, c, h, w) = self.dims4(x)?;
        self.check_channel_param(x, gamma, "gamma")?;
        self.check_channel_param(x, beta, "beta")?;
        if n == 0 || h * w == 0 {
            return Err(config_err!("batch_norm on an empty batch"));
        }
        let plane = h * w;
        let (mean, var) = kernels::channel_stats(self.value(x).data(), n, c, plane);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, &mean, &inv_std);
        self.counter.elementwise += y.numel() as u64;
        y.ensure_finite("batch_norm output")?;
        let v = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[x, gamma, beta],
        );
        let stats = BatchStats {
            mean,
            var,
            count: n * plane,
        };
        Ok((v, stats))
    }

    /// BatchNorm using stored running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, _, _) = self.dims4(x)?;
        self.check_channel_param(x, gamma, "gamma")?;
        self.check_channel_param(x, beta, "beta")?;
        if n == 0 {
            return Err(config_err!("batch_norm on an empty batch"));
        }
        if running_mean.len() != c || running_var.len() != c {
            return Err(config_err!("running statistics do not match {c} channels"));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (y, xhat) = self.bn_apply(x, gamma, beta, running_mean, &inv_std);
        self.counter.elementwise += y.numel() as u64;
        y.ensure_finite("batch_norm output")?;
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[x, gamma, beta],
        ))
    }

    fn bn_apply(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
    ) -> (Tensor, Vec<f64>) {
        let xt = self.value(x);
        let (n, c, h, w) = xt.dims4().expect("checked rank");
        let plane = h * w;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; xt.numel()];
        let mut y = vec![0.0; xt.numel()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (mu, is, gv, bv) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
                for i in off..off + plane {
                    let xh = (xt.data()[i] - mu) * is;
                    xhat[i] = xh;
                    y[i] = gv * xh + bv;
                }
            }
        }
        (Tensor::new(xt.shape().to_vec(), y).expect("same shape"), xhat)
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        self.check_channel_param(x, slope, "prelu slope")?;
        let plane = h * w;
        let a = self.value(slope).data();
        let mut y = self.value(x).data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let av = a[ch];
                for v in &mut y[(b * c + ch) * plane..][..plane] {
                    if *v < 0.0 {
                        *v *= av;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n, c, h, w], y)?;
        self.counter.elementwise += t.numel() as u64;
        Ok(self.push(t, Op::Prelu { x, slope }, &[x, slope]))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(config_err!("avg_pool2 needs even spatial size, got {h}x{w}"));
        }
        let out = kernels::avg_pool2_forward(self.value(x).data(), n * c, h, w);
        let t = Tensor::new(vec![n, c, h / 2, w / 2], out)?;
        self.counter.elementwise += t.numel() as u64;
        Ok(self.push(t, Op::AvgPool2 { x }, &[x]))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if factor == 0 {
            return Err(config_err!("upsample factor must be >= 1"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let out = kernels::upsample_forward(self.value(x).data(), n * c, h, w, factor);
        let t = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        self.counter.elementwise += t.numel() as u64;
        Ok(self.push(t, Op::Upsample { x, factor }, &[x]))
    }

    /// Elementwise sum of equally shaped values.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| config_err!("add of zero terms"))?;
        if xs.len() == 1 {
            return Ok(first);
        }
        let shape = self.shape(first).to_vec();
        let mut acc = vec![0.0; self.value(first).numel()];
        for &v in xs {
            if self.shape(v) != shape.as_slice() {
                return Err(config_err!("add shape mismatch {:?} vs {:?}", shape, self.shape(v)));
            }
            for (a, b) in acc.iter_mut().zip(self.value(v).data()) {
                *a += b;
            }
        }
        let t = Tensor::new(shape, acc)?;
        Ok(self.push(t, Op::Add(xs.to_vec()), xs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let parts: Vec<&Tensor> = xs.iter().map(|&v| self.value(v)).collect();
        let t = Tensor::concat_channels(&parts)?;
        Ok(self.push(t, Op::Concat(xs.to_vec()), xs))
    }

    /// Spatial mean per sample and channel: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.dims4(x)?;
        if h * w == 0 {
            return Err(config_err!("global_avg_pool on an empty map"));
        }
        let plane = h * w;
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let t = Tensor::new(vec![n, c], data)?;
        Ok(self.push(t, Op::Gap { x }, &[x]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale { x, c }, &[x])
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(config_err!(
                "mul shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum { x }, &[x])
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(config_err!(
                "logits {:?} vs target {:?}",
                z.shape(),
                target.shape()
            ));
        }
        let m = z.numel().max(1) as f64;
        let loss: f64 = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / m;
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                target: target.clone(),
            },
            &[logits],
        ))
    }

    fn accumulate(&mut self, v: Var, g: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            }
            None => {
                node.grad = Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"));
            }
        }
    }

    /// Reverse pass from a scalar root. Gradients of earlier calls are
    /// cleared first.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(config_err!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(Tensor::new(self.shape(root).to_vec(), vec![1.0])?);
        for idx in (0..=root.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at node {idx}")));
            }
            self.backprop_node(idx, &g);
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor) {
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        self.backprop_op(&op, g);
        self.nodes[idx].op = op;
    }

    fn backprop_op(&mut self, op: &Op, g: &Tensor) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::Conv { x, w, b, shape } => {
                let (x, w, b, shape) = (*x, *w, *b, *shape);
                let grads = kernels::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    gd,
                    &shape,
                    self.requires_grad(x),
                    self.requires_grad(w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                if let Some(gx) = grads.input {
                    self.accumulate(x, gx);
                }
                if let Some(gw) = grads.weight {
                    self.accumulate(w, gw);
                }
                if let (Some(b), Some(gb)) = (b, grads.bias) {
                    self.accumulate(b, gb);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (x, gamma, beta, batch_stats) = (*x, *gamma, *beta, *batch_stats);
                let (n, c, h, w) = g.dims4().expect("rank 4");
                let plane = h * w;
                let m = (n * plane) as f64;
                let gam = self.value(gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        let gs = &gd[off..off + plane];
                        let xs = &xhat[off..off + plane];
                        dbeta[ch] += gs.iter().sum::<f64>();
                        dgamma[ch] += gs.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                let gx = self.requires_grad(x).then(|| {
                    let mut gx = vec![0.0; gd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let scale = gam[ch] * inv_std[ch];
                            if batch_stats {
                                let (mb, mg) = (dbeta[ch] / m, dgamma[ch] / m);
                                for i in off..off + plane {
                                    gx[i] = scale * (gd[i] - mb - xhat[i] * mg);
                                }
                            } else {
                                for i in off..off + plane {
                                    gx[i] = scale * gd[i];
                                }
                            }
                        }
                    }
                    gx
                });
                if let Some(gx) = gx {
                    self.accumulate(x, gx);
                }
                self.accumulate(gamma, dgamma);
                self.accumulate(beta, dbeta);
            }
            Op::Prelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                let (n, c, h, w) = g.dims4().expect("rank 4");
                let plane = h * w;
                let xv = self.value(x).data();
                let a = self.value(slope).data();
                let mut gx = vec![0.0; gd.len()];
                let mut ga = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for i in off..off + plane {
                            if xv[i] < 0.0 {
                                gx[i] = a[ch] * gd[i];
                                ga[ch] += xv[i] * gd[i];
                            } else {
                                gx[i] = gd[i];
                            }
                        }
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(slope, ga);
            }
            Op::AvgPool2 { x } => {
                let x = *x;
                let (n, c, h, w) = self.dims4(x).expect("rank 4");
                let gx = kernels::avg_pool2_backward(gd, n * c, h, w);
                self.accumulate(x, gx);
            }
            Op::Upsample { x, factor } => {
                let (x, f) = (*x, *factor);
                let (n, c, h, w) = self.dims4(x).expect("rank 4");
                let gx = kernels::upsample_backward(gd, n * c, h, w, f);
                self.accumulate(x, gx);
            }
            Op::Add(xs) => {
                for &v in xs {
                    self.accumulate(v, gd.to_vec());
                }
            }
            Op::Concat(xs) => {
                let (n, _, h, w) = g.dims4().expect("rank 4");
                let plane = h * w;
                let total = g.shape()[1];
                let mut start = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    let mut part = Vec::with_capacity(n * c * plane);
                    for b in 0..n {
                        part.extend_from_slice(&gd[(b * total + start) * plane..][..c * plane]);
                    }
                    start += c;
                    self.accumulate(v, part);
                }
            }
            Op::Gap { x } => {
                let x = *x;
                let (_, _, h, w) = self.dims4(x).expect("rank 4");
                let plane = h * w;
                let inv = 1.0 / plane as f64;
                let gx: Vec<f64> = gd
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv * inv, plane))
                    .collect();
                self.accumulate(x, gx);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.accumulate(x, gd.iter().map(|v| v * c).collect());
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let ga = gd.iter().zip(self.value(b).data()).map(|(g, v)| g * v).collect();
                let gb = gd.iter().zip(self.value(a).data()).map(|(g, v)| g * v).collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.value(x).numel();
                self.accumulate(x, vec![gd[0]; n]);
            }
            Op::BceLogits { logits, target } => {
                let logits = *logits;
                let z = self.value(logits).data();
                let m = z.len().max(1) as f64;
                let gx: Vec<f64> = z
                    .iter()
                    .zip(target.data())
                    .map(|(&z, &y)| gd[0] * (sigmoid(z) - y) / m)
                    .collect();
                self.accumulate(logits, gx);
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
