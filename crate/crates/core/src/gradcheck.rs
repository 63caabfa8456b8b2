//! Central finite-difference gradient checking.
//!
//! The numeric side never touches the tape: it re-evaluates the forward
//! function at perturbed inputs, so it is an independent check of every
//! gradient rule. Runs in f64; analytic and numeric gradients are
//! compared with the relative infinity-norm error
//! `max|a - n| / (max|n| + 1e-8)`.

use crate::autodiff::{backward, Graph, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Checks `d loss / d input` for every input against central finite
/// differences and returns the worst relative error across inputs.
///
/// `f` must build the scalar loss from the given tensors; it is called
/// once with tracked leaves (analytic pass) and repeatedly with plain
/// tensors (numeric passes).
pub fn max_relative_error(
    inputs: &[(Vec<usize>, Vec<f64>)],
    epsilon: f64,
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
) -> f64 {
    let graph = Graph::new();
    let leaves: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(shape, data)| graph.leaf(&Tensor::from_vec(shape.clone(), data.clone())))
        .collect();
    let loss = f(&leaves);
    let grads = backward(&loss).expect("gradient check loss must be on the tape");
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|l| grads.get_or_zeros(l)).collect();

    let eval = |point: &[(Vec<usize>, Vec<f64>)]| -> f64 {
        let plain: Vec<Tensor<f64>> = point
            .iter()
            .map(|(shape, data)| Tensor::from_vec(shape.clone(), data.clone()))
            .collect();
        f(&plain).item()
    };

    let mut worst = 0.0f64;
    for (idx, (_, data)) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; data.len()];
        for j in 0..data.len() {
            let mut point: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
            point[idx].1[j] = data[j] + epsilon;
            let plus = eval(&point);
            point[idx].1[j] = data[j] - epsilon;
            let minus = eval(&point);
            numeric[j] = (plus - minus) / (2.0 * epsilon);
        }
        let max_abs_diff = analytic[idx]
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0f64, f64::max);
        let scale = numeric.iter().map(|n| n.abs()).fold(0.0f64, f64::max) + 1e-8;
        worst = worst.max(max_abs_diff / scale);
    }
    worst
}

/// Convenience wrapper asserting the check passes at the given bound.
pub fn assert_gradients_close(
    inputs: &[(Vec<usize>, Vec<f64>)],
    bound: f64,
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
) {
    let err = max_relative_error(inputs, DEFAULT_EPSILON, f);
    assert!(
        err <= bound,
        "finite-difference check failed: max relative error {err:.3e} > {bound:.1e}"
    );
}
