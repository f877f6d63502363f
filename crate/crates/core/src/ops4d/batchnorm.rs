//! 4D batch normalization.
//!
//! `(B, C, Lx, Ly, Lz, T)` is viewed as `(B, C, Lx, Ly, Lz*T)` and handed to
//! a per-channel 3D batch norm. Reshape preserves element order, so the
//! normalized tensor can be viewed back under the original shape.

use crate::error::{Error, Result};
use crate::tensor::Tensor6D;

pub const DEFAULT_EPS: f32 = 1e-5;
pub const DEFAULT_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm4d {
    /// `(C, 1, 1, 1, 1, 1)`
    pub gamma: Tensor6D,
    /// `(C, 1, 1, 1, 1, 1)`
    pub beta: Tensor6D,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

/// Values kept from a forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    normalized: Tensor6D,
    inv_std: Vec<f32>,
    mode: Mode,
}

#[derive(Clone, Debug)]
pub struct BatchNormGrads {
    pub input: Tensor6D,
    pub gamma: Tensor6D,
    pub beta: Tensor6D,
}

impl BatchNorm4d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor6D::full([channels, 1, 1, 1, 1, 1], 1.0),
            beta: Tensor6D::zeros([channels, 1, 1, 1, 1, 1]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&mut self, x: &Tensor6D, mode: Mode) -> Result<(Tensor6D, BatchNormCache)> {
        let [b, c, lx, ly, lz, lt] = x.shape();
        if c != self.channels() {
            return Err(Error::shape(format!(
                "input has {c} channels, layer has {}",
                self.channels()
            )));
        }
        let folded = x.reshape(&[b, c, lx, ly, lz * lt])?;
        let (y, cache) = self.forward_5d(&folded, mode)?;
        Ok((
            y.reshape(&x.shape())?,
            BatchNormCache {
                normalized: cache.normalized.reshape(&x.shape())?,
                ..cache
            },
        ))
    }

    /// Eval-mode forward without touching layer state.
    pub fn forward_eval(&self, x: &Tensor6D) -> Result<Tensor6D> {
        let mut layer = self.clone();
        Ok(layer.forward(x, Mode::Eval)?.0)
    }

    /// Per-channel normalization of a 5D tensor `(B, C, D1, D2, D3)`.
    fn forward_5d(&mut self, x: &Tensor6D, mode: Mode) -> Result<(Tensor6D, BatchNormCache)> {
        let [b, c, ..] = x.shape();
        let per = if b * c == 0 { 0 } else { x.len() / (b * c) };
        let n = b * per;
        if mode == Mode::Train && n < 2 {
            return Err(Error::arg(format!(
                "batch statistics need at least 2 values per channel, got {n}"
            )));
        }
        let data = x.data();
        let mut normalized = Tensor6D::zeros(x.shape());
        let mut out = Tensor6D::zeros(x.shape());
        let mut inv_std = vec![0.0f32; c];
        for ch in 0..c {
            let slices = (0..b).map(|bi| &data[(bi * c + ch) * per..(bi * c + ch + 1) * per]);
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = slices.clone().flatten().map(|&v| v as f64).sum::<f64>() / n as f64;
                    let var = slices
                        .clone()
                        .flatten()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>()
                        / n as f64;
                    let m = self.momentum as f64;
                    let unbiased = var * n as f64 / (n - 1) as f64;
                    self.running_mean[ch] = ((1.0 - m) * self.running_mean[ch] as f64 + m * mean) as f32;
                    self.running_var[ch] = ((1.0 - m) * self.running_var[ch] as f64 + m * unbiased) as f32;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[ch] as f64, self.running_var[ch] as f64),
            };
            let is = 1.0 / (var + self.eps as f64).sqrt();
            inv_std[ch] = is as f32;
            let g = self.gamma.data()[ch];
            let be = self.beta.data()[ch];
            for bi in 0..b {
                let r = (bi * c + ch) * per..(bi * c + ch + 1) * per;
                for i in r {
                    let xh = ((data[i] as f64 - mean) * is) as f32;
                    normalized.data_mut()[i] = xh;
                    out.data_mut()[i] = g * xh + be;
                }
            }
        }
        Ok((
            out,
            BatchNormCache {
                normalized,
                inv_std,
                mode,
            },
        ))
    }

    pub fn backward(&self, grad_out: &Tensor6D, cache: &BatchNormCache) -> Result<BatchNormGrads> {
        if grad_out.shape() != cache.normalized.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} does not match cached activation {:?}",
                grad_out.shape(),
                cache.normalized.shape()
            )));
        }
        let [b, c, ..] = grad_out.shape();
        let per = if b * c == 0 { 0 } else { grad_out.len() / (b * c) };
        let n = (b * per) as f64;
        let g = grad_out.data();
        let xh = cache.normalized.data();
        let mut dx = Tensor6D::zeros(grad_out.shape());
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        for ch in 0..c {
            let ranges: Vec<_> = (0..b)
                .map(|bi| (bi * c + ch) * per..(bi * c + ch + 1) * per)
                .collect();
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for r in &ranges {
                for i in r.clone() {
                    sum_g += g[i] as f64;
                    sum_gx += (g[i] * xh[i]) as f64;
                }
            }
            dgamma[ch] = sum_gx as f32;
            dbeta[ch] = sum_g as f32;
            let scale = self.gamma.data()[ch] as f64 * cache.inv_std[ch] as f64;
            let d = dx.data_mut();
            for r in &ranges {
                for i in r.clone() {
                    d[i] = match cache.mode {
                        Mode::Train => {
                            (scale * (g[i] as f64 - sum_g / n - xh[i] as f64 * sum_gx / n)) as f32
                        }
                        Mode::Eval => (scale * g[i] as f64) as f32,
                    };
                }
            }
        }
        Ok(BatchNormGrads {
            input: dx,
            gamma: Tensor6D::from_vec(self.gamma.shape(), dgamma)?,
            beta: Tensor6D::from_vec(self.beta.shape(), dbeta)?,
        })
    }
}
