//! Adam with L2 weight decay folded into the gradient, and a plateau
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor6D;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3.0e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1.0e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor6D>,
    pub v: Vec<Tensor6D>,
}

impl AdamState {
    pub fn new(params: &[&Tensor6D]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor6D::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor6D::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter is touched.
pub fn adam_step(
    params: &mut [&mut Tensor6D],
    grads: &[Tensor6D],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::shape(format!(
                "parameter {i}: shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite gradient in parameter {i} at element {j}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g[k] + cfg.weight_decay * *w;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mh = m[k] as f64 / bc1;
            let vh = v[k] as f64 / bc2;
            *w -= (cfg.lr as f64 * mh / (vh.sqrt() + cfg.eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// observations fail to beat the best one.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    pub factor: f32,
    pub best: f64,
    pub bad: usize,
}

impl Plateau {
    pub fn new(patience: usize, factor: f32) -> Result<Self> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::arg(format!("plateau factor {factor} outside (0, 1)")));
        }
        if patience == 0 {
            return Err(Error::arg("plateau patience must be at least 1"));
        }
        Ok(Self {
            patience,
            factor,
            best: f64::INFINITY,
            bad: 0,
        })
    }

    /// Returns the learning rate to use next.
    pub fn observe(&mut self, loss: f64, lr: f32) -> f32 {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            lr * self.factor
        } else {
            lr
        }
    }
}
