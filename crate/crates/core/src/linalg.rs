//! Cholesky helpers with escalating diagonal jitter.
//!
//! Curvature matrices assembled from finite differences or near-singular
//! precisions can sit just outside the SPD cone. Every factorisation here
//! first tries the matrix as given and then retries with `eps * I` added,
//! escalating `eps` from 1e-8 by factors of ten. Past 1e-2 the matrix is
//! treated as genuinely indefinite and the caller gets an error instead of
//! a silently regularised answer.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::fmt;

/// Smallest jitter tried after the unmodified matrix fails.
const JITTER_MIN: f64 = 1e-8;
/// Largest jitter tried before giving up.
const JITTER_MAX: f64 = 1e-2;

/// Factorisation failed even with the maximum jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyError {
    /// Side length of the offending matrix.
    pub dim: usize,
}

impl fmt::Display for CholeskyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "matrix of dimension {} is not positive definite even with {JITTER_MAX:e} jitter",
            self.dim
        )
    }
}

impl std::error::Error for CholeskyError {}

/// Cholesky factorisation with escalating jitter.
pub fn jittered_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>, CholeskyError> {
    debug_assert_eq!(m.nrows(), m.ncols(), "cholesky needs a square matrix");
    if let Some(ch) = Cholesky::new(m.clone()) {
        return Ok(ch);
    }
    let mut eps = JITTER_MIN;
    while eps <= JITTER_MAX * (1.0 + 1e-12) {
        let mut jittered = m.clone();
        for i in 0..m.nrows() {
            jittered[(i, i)] += eps;
        }
        if let Some(ch) = Cholesky::new(jittered) {
            return Ok(ch);
        }
        eps *= 10.0;
    }
    Err(CholeskyError { dim: m.nrows() })
}

/// SPD inverse via [`jittered_cholesky`].
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, CholeskyError> {
    Ok(jittered_cholesky(m)?.inverse())
}

/// Log-determinant of an SPD matrix, `2 * sum_i ln L_ii`.
pub fn spd_log_det(m: &DMatrix<f64>) -> Result<f64, CholeskyError> {
    let ch = jittered_cholesky(m)?;
    Ok(2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Laplace covariance and matching precision from one curvature matrix.
///
/// Both come from a single jittered factorisation, so the pair satisfies
/// `precision = sigma^{-1}` exactly at the regularisation actually applied
/// rather than drifting apart across two independent jitter decisions.
pub fn covariance_from_curvature(
    h: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>), CholeskyError> {
    let ch = jittered_cholesky(h)?;
    let l = ch.l();
    let precision = &l * l.transpose();
    Ok((ch.inverse(), precision))
}

/// Spectral-radius estimate by a fixed number of power iterations from the
/// normalised all-ones vector; returns `||M v||` after the final iterate.
pub fn spectral_radius_estimate(m: &DMatrix<f64>, iters: usize) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut radius = 0.0;
    for _ in 0..iters {
        let w = m * &v;
        radius = w.norm();
        if radius == 0.0 {
            return 0.0;
        }
        v = w / radius;
    }
    radius
}
