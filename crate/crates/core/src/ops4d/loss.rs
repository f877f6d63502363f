use crate::error::{Error, Result};
use crate::tensor::Tensor6D;

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn mse_loss(pred: &Tensor6D, target: &Tensor6D) -> Result<(f64, Tensor6D)> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and target {:?} differ",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0f64;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            loss += d * d;
            (2.0 * d / n) as f32
        })
        .collect();
    Ok((loss / n, Tensor6D::from_vec(pred.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Fill;

    #[test]
    fn zero_and_unit_offsets() {
        let t = Tensor6D::seeded_fill([1, 1, 3, 3, 3, 3], Fill::Normal { mean: 0.0, std: 1.0 }, 1)
            .unwrap();
        let (l, g) = mse_loss(&t, &t).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
        let (l, _) = mse_loss(&t.map(|v| v + 1.0), &t).unwrap();
        assert!((l - 1.0).abs() < 1e-6);
        assert!(mse_loss(&t, &Tensor6D::zeros([1, 1, 3, 3, 3, 2])).is_err());
    }
}
