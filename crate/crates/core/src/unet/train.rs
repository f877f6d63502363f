//! Mini-batch training driver.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamConfig, AdamState, Plateau};
use super::model::UNet4D;
use crate::error::{Error, Result};
use crate::ops4d::mse_loss;
use crate::tensor::Tensor6D;

/// One `(input, target)` training pair, each with batch extent 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor6D,
    pub target: Tensor6D,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f32,
    /// Epochs run at the initial rate before the plateau rule is consulted.
    pub constant_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            epochs: 10,
            batch_size: 4,
            seed: 0,
            val_fraction: 0.1,
            plateau_patience: 5,
            plateau_factor: 0.5,
            constant_epochs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f32,
}

#[derive(Debug)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub state: AdamState,
    /// Set when training stopped on a non-finite loss or gradient.
    pub diverged: Option<String>,
}

/// Deterministic train/validation split: indices shuffled by `seed`, the
/// last `fraction` of them held out (none when fewer than two samples).
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if n < 2 {
        0
    } else {
        ((n as f64 * fraction).round() as usize).clamp(usize::from(fraction > 0.0), n - 1)
    };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

fn batch(data: &[Sample], idx: &[usize]) -> Result<(Tensor6D, Tensor6D)> {
    let inputs: Vec<&Tensor6D> = idx.iter().map(|&i| &data[i].input).collect();
    let targets: Vec<&Tensor6D> = idx.iter().map(|&i| &data[i].target).collect();
    Ok((Tensor6D::stack_batch(&inputs)?, Tensor6D::stack_batch(&targets)?))
}

/// Mean MSE of the model in eval mode over `idx`.
pub fn evaluate(model: &UNet4D, data: &[Sample], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for &i in idx {
        total += mse_loss(&model.predict(&data[i].input)?, &data[i].target)?.0;
    }
    Ok(total / idx.len() as f64)
}

/// Trains in place. Batches are fixed at the start and visited in a
/// reshuffled order each epoch. `on_epoch` sees every record as it is made.
pub fn train(
    model: &mut UNet4D,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    if cfg.adam.lr < 0.0 || !cfg.adam.lr.is_finite() {
        return Err(Error::arg(format!("learning rate {} is invalid", cfg.adam.lr)));
    }
    for (i, s) in data.iter().enumerate() {
        if s.input.shape()[0] != 1 || s.target.shape()[0] != 1 {
            return Err(Error::shape(format!("sample {i} must have batch extent 1")));
        }
        if s.input.shape()[2..] != s.target.shape()[2..] {
            return Err(Error::shape(format!(
                "sample {i}: input {:?} and target {:?} disagree",
                s.input.shape(),
                s.target.shape()
            )));
        }
    }

    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let batches: Vec<Vec<usize>> = train_idx.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    let mut order: Vec<usize> = (0..batches.len()).collect();

    let mut state = AdamState::new(&model.params());
    let mut plateau = Plateau::new(cfg.plateau_patience, cfg.plateau_factor)?;
    let mut adam = cfg.adam.clone();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0f64; batches.len()];
        for &b in &order {
            let (x, y) = batch(data, &batches[b])?;
            let (pred, tape) = model.forward_train(&x)?;
            let (loss, grad) = mse_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Ok(TrainReport {
                    history,
                    state,
                    diverged: Some(format!("loss became {loss} in epoch {epoch}")),
                });
            }
            let grads = model.backward(&grad, &tape)?;
            if let Err(e) = adam_step(&mut model.params_mut(), &grads, &mut state, &adam) {
                return Ok(TrainReport {
                    history,
                    state,
                    diverged: Some(e.to_string()),
                });
            }
            losses[b] = loss * batches[b].len() as f64;
        }
        let train_mse = losses.iter().sum::<f64>() / train_idx.len() as f64;
        let val_mse = evaluate(model, data, &val_idx)?;
        let record = EpochRecord {
            epoch,
            step: state.step,
            train_mse,
            val_mse,
            lr: adam.lr,
        };
        on_epoch(&record);
        history.push(record);
        if epoch + 1 >= cfg.constant_epochs {
            let monitored = if val_idx.is_empty() { train_mse } else { val_mse };
            adam.lr = plateau.observe(monitored, adam.lr);
        }
    }
    Ok(TrainReport {
        history,
        state,
        diverged: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_holds_out_a_tenth() {
        let (tr, va) = split_indices(50, 0.1, 3);
        assert_eq!((tr.len(), va.len()), (45, 5));
        let mut all: Vec<_> = tr.iter().chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, (0..50).collect::<Vec<_>>());
        assert_eq!(split_indices(1, 0.1, 3).1.len(), 0);
        assert_eq!(split_indices(3, 0.1, 3).1.len(), 1);
    }
}
