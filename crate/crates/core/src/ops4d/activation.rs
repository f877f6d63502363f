use crate::error::{Error, Result};
use crate::tensor::Tensor6D;

pub const DEFAULT_LEAKY_SLOPE: f32 = 0.01;

pub fn leaky_relu(x: &Tensor6D, slope: f32) -> Tensor6D {
    x.map(|v| if v >= 0.0 { v } else { slope * v })
}

/// Gradient of [`leaky_relu`], evaluated at the forward input.
pub fn leaky_relu_backward(grad_out: &Tensor6D, x: &Tensor6D, slope: f32) -> Result<Tensor6D> {
    if grad_out.shape() != x.shape() {
        return Err(Error::shape("leaky_relu gradient shape mismatch"));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v >= 0.0 { g } else { slope * g })
        .collect();
    Tensor6D::from_vec(x.shape(), data)
}

pub fn sigmoid(x: &Tensor6D) -> Tensor6D {
    x.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Gradient of [`sigmoid`], evaluated from the forward output `y`.
pub fn sigmoid_backward(grad_out: &Tensor6D, y: &Tensor6D) -> Result<Tensor6D> {
    if grad_out.shape() != y.shape() {
        return Err(Error::shape("sigmoid gradient shape mismatch"));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(y.data())
        .map(|(&g, &s)| g * s * (1.0 - s))
        .collect();
    Tensor6D::from_vec(y.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definitions() {
        let x = Tensor6D::from_vec([1, 1, 1, 1, 1, 3], vec![0.0, -1.0, 2.0]).unwrap();
        assert_eq!(leaky_relu(&x, 0.01).data(), &[0.0, -0.01, 2.0]);
        let s = sigmoid(&x);
        assert_eq!(s.data()[0], 0.5);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor6D::from_vec([1, 1, 1, 1, 1, 2], vec![-200.0, 200.0]).unwrap();
        assert!(sigmoid(&x).all_finite());
    }
}
