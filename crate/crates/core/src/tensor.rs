use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Dense row-major `f64` array. Feature maps use the `[N, C, H, W]` layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(config_err!(
                "shape {:?} holds {} values but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(config_err!("expected a rank-4 tensor, got shape {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(config_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite values in {what}")))
        }
    }

    /// Copy of channels `[start, start + len)` of a rank-4 tensor.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if start + len > c {
            return Err(config_err!("channel range {start}+{len} exceeds {c}"));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        for b in 0..n {
            let base = (b * c + start) * plane;
            out.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor::new(vec![n, len, h, w], out)
    }

    /// Keep only the listed channels (dimension 1), in the given order.
    pub fn select_channels(&self, keep: &[usize]) -> Result<Tensor> {
        self.select_axis(1, keep)
    }

    /// Keep only the listed indices along `axis`.
    pub fn select_axis(&self, axis: usize, keep: &[usize]) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(config_err!("axis {axis} out of range for {:?}", self.shape));
        }
        let dim = self.shape[axis];
        if let Some(&bad) = keep.iter().find(|&&k| k >= dim) {
            return Err(config_err!("index {bad} out of range for axis {axis} of size {dim}"));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * keep.len() * inner);
        for o in 0..outer {
            for &k in keep {
                let base = (o * dim + k) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = keep.len();
        Tensor::new(shape, data)
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| config_err!("concat of zero tensors"))?;
        let (n, _, h, w) = first.dims4()?;
        let mut total = 0;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(config_err!("concat shape mismatch {:?} vs {:?}", first.shape, p.shape));
            }
            total += pc;
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for p in parts {
                let c = p.shape[1];
                let base = b * c * plane;
                data.extend_from_slice(&p.data[base..base + c * plane]);
            }
        }
        Tensor::new(vec![n, total, h, w], data)
    }
}
