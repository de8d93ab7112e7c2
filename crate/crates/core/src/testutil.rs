//! Test-only helpers shared across module tests.

use crate::nnet::{flatten_gradients, mse, Trainable};
use crate::rng::{self, Rng};
use crate::tensor::Matrix;

pub fn random_matrix(rng: &mut Rng, r: usize, c: usize, scale: f64) -> Matrix {
    let data = (0..r * c)
        .map(|_| scale * rng::normal(rng))
        .collect::<Vec<f64>>();
    Matrix::from_vec(r, c, data).unwrap()
}

/// Largest relative error between analytic gradients and central
/// differences of the loss, with `h = 1e-5 · max(1, |θ|)`.
pub fn max_fd_error<M: Trainable + Clone>(model: &M, x: &Matrix, t: &Matrix) -> f64 {
    let (grads, _) = model.loss_gradient(x, t).unwrap();
    let analytic = flatten_gradients(&grads);
    let theta = model.flat_params();
    assert_eq!(analytic.len(), theta.len());
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in 0..theta.len() {
        let h = 1e-5 * theta[i].abs().max(1.0);
        let mut p = theta.clone();
        p[i] = theta[i] + h;
        probe.set_flat_params(&p);
        let up = mse(&probe.predict(x).unwrap(), t).unwrap();
        p[i] = theta[i] - h;
        probe.set_flat_params(&p);
        let down = mse(&probe.predict(x).unwrap(), t).unwrap();
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}
