#![allow(dead_code)]

use shufdp::nn::ParamSet;
use shufdp::tensor::Matrix;

pub const STEP: f64 = 1e-5;

pub fn random_matrix(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// A fixed linear functional of a block output, used as the scalar loss.
pub fn probe(out: &Matrix<f64>, weights: &Matrix<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Largest relative deviation, with magnitudes below 1e-3 treated as 1e-3.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

pub fn central_difference<P: ParamSet<f64>>(params: &P, f: impl Fn(&P) -> f64) -> Vec<f64> {
    let flat = params.flatten();
    let mut probe_params = params.clone();
    (0..flat.len())
        .map(|i| {
            let mut v = flat.clone();
            v[i] = flat[i] + STEP;
            probe_params.set_from_flat(&v).unwrap();
            let up = f(&probe_params);
            v[i] = flat[i] - STEP;
            probe_params.set_from_flat(&v).unwrap();
            let down = f(&probe_params);
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

pub fn input_difference(x: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> Vec<f64> {
    (0..x.data().len())
        .map(|i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += STEP;
            let mut xm = x.clone();
            xm.data_mut()[i] -= STEP;
            (f(&xp) - f(&xm)) / (2.0 * STEP)
        })
        .collect()
}
