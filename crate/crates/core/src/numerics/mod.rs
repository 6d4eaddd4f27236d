//! Dense linear algebra, activations, reproducible randomness and the
//! finite-difference gradient oracle.

mod activation;
mod matrix;
mod rng;

pub use activation::{
    log_softmax, log_sum_exp, sigmoid, sigmoid_grad_from_output, softmax, tanh, tanh_grad_from_output,
};
pub(crate) use activation::{log_softmax_inplace, log_sum_exp_unchecked};
pub use matrix::{matmul, matmul_acc, matmul_nt, matmul_nt_acc, matmul_tn, matmul_tn_acc, Matrix};
pub use rng::{Rng, RngState};

use crate::error::{Error, Result};

/// Inverted-dropout mask: each entry is `0` or `1 / keep_prob`.
pub fn bernoulli_mask(rng: &mut Rng, rows: usize, cols: usize, keep_prob: f64) -> Result<Matrix> {
    check_keep_prob(keep_prob)?;
    if keep_prob == 1.0 {
        return Ok(Matrix::ones(rows, cols));
    }
    let scale = 1.0 / keep_prob;
    Ok(Matrix::from_fn(rows, cols, |_, _| if rng.uniform() < keep_prob { scale } else { 0.0 }))
}

pub(crate) fn check_keep_prob(keep_prob: f64) -> Result<()> {
    if keep_prob > 0.0 && keep_prob <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("keep probability must lie in (0, 1], got {keep_prob}")))
    }
}

/// Central-difference gradient of `f` at `theta`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut x = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x);
        x[i] = orig - eps;
        let minus = f(&x);
        x[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { context: "finite-difference objective".into(), index: i });
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Ok(grad)
}

/// Magnitude below which gradient entries are compared on an absolute scale.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR);
    (a - b).abs() / denom
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| relative_error(x, y)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keep_one_gives_ones() {
        let mut rng = Rng::new(0);
        assert_eq!(bernoulli_mask(&mut rng, 3, 4, 1.0).unwrap(), Matrix::ones(3, 4));
    }

    #[test]
    fn keep_prob_out_of_range_rejected() {
        let mut rng = Rng::new(0);
        assert!(bernoulli_mask(&mut rng, 1, 1, 0.0).is_err());
        assert!(bernoulli_mask(&mut rng, 1, 1, 1.5).is_err());
    }

    #[test]
    fn mask_entries_and_mean() {
        for &p in &[0.25, 0.5, 0.9] {
            let mut rng = Rng::new(11);
            let m = bernoulli_mask(&mut rng, 1000, 1000, p).unwrap();
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0 / p));
            let mean = m.sum() / m.len() as f64;
            assert!((mean - 1.0).abs() < 0.01, "p={p} mean={mean}");
        }
    }

    #[test]
    fn same_seed_same_mask() {
        let a = bernoulli_mask(&mut Rng::new(9), 8, 8, 0.5).unwrap();
        let b = bernoulli_mask(&mut Rng::new(9), 8, 8, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fd_quadratic_and_sigmoid() {
        let g = finite_difference_gradient(|t| t.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_difference_gradient(|t| sigmoid(t[0]), &[0.0], 1e-5).unwrap();
        assert!((g[0] - 0.25).abs() < 1e-10);
    }

    #[test]
    fn fd_reports_offending_index() {
        let err = finite_difference_gradient(|t| if t[1] > 1.0 { f64::NAN } else { 0.0 }, &[0.0, 1.0], 1e-3)
            .unwrap_err();
        match err {
            Error::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }
}
