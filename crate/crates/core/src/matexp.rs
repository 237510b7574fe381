//! The phi-1 matrix function, `phi1(Z) = sum_{m>=0} Z^m/(m+1)!`.
//!
//! `phi1` extends `Z^{-1}(exp(Z) - I)` to singular arguments, which is the
//! form the state update needs: its Jacobian contains the nilpotent shift
//! operator and is routinely non-invertible. Evaluation is by truncated
//! Taylor series after scaling `Z` into a small-norm ball, followed by
//! paired squaring of `exp` and `phi1` back up. The recurrences
//! `exp(2W) = exp(W)^2` and `phi1(2W) = (exp(W) + I) phi1(W) / 2` keep the
//! pair consistent at every doubling.

use nalgebra::DMatrix;

/// Norm ball inside which the truncated Taylor series is used directly.
const TAYLOR_BOUND: f64 = 0.25;

/// Series order: for `||W|| <= 0.25` the m = 16 Taylor term is below
/// 0.25^16/16! ~ 1e-23, far under f64 resolution.
const TAYLOR_TERMS: usize = 16;

/// Evaluate `phi1(Z)`.
///
/// For nilpotent `Z` small enough to skip scaling, the series truncates
/// itself and the result is the exact matrix polynomial.
pub fn phi1(z: &DMatrix<f64>) -> DMatrix<f64> {
    debug_assert_eq!(z.nrows(), z.ncols(), "phi1 needs a square matrix");
    let n = z.nrows();

    // Frobenius norm upper-bounds the spectral norm, so it is a safe
    // convergence control.
    let norm = z.norm();
    let squarings = if norm > TAYLOR_BOUND {
        // The cap keeps the scale a finite power of two; norms that need
        // more than 2^1023 only arise from already-diverged callers, and
        // the non-finite result is theirs to detect.
        (norm / TAYLOR_BOUND).log2().ceil().min(1023.0) as i32
    } else {
        0
    };
    let w = z / 2f64.powi(squarings);

    // term holds W^m/m!; E accumulates exp, P accumulates phi1.
    let eye = DMatrix::identity(n, n);
    let mut term = eye.clone();
    let mut e = eye.clone();
    let mut p = eye.clone();
    for m in 1..=TAYLOR_TERMS {
        term = (&term * &w) / m as f64;
        e += &term;
        p += &term / (m + 1) as f64;
    }

    for _ in 0..squarings {
        p = (&e + &eye) * &p / 2.0;
        e = &e * &e;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn zero_argument_is_identity() {
        let p = phi1(&DMatrix::zeros(4, 4));
        assert_eq!(p, DMatrix::identity(4, 4));
    }

    #[test]
    fn scalar_closed_form() {
        for &a in &[-3.0, -0.4, 1e-6, 0.7, 2.5, 40.0] {
            let p = phi1(&DMatrix::from_element(1, 1, a));
            // exp_m1 keeps the oracle accurate for tiny a.
            let expected = a.exp_m1() / a;
            assert_relative_eq!(p[(0, 0)], expected, max_relative = 1e-13);
        }
    }

    #[test]
    fn diagonal_closed_form() {
        let d = DVector::from_column_slice(&[-1.2, 0.3, 5.0]);
        let p = phi1(&DMatrix::from_diagonal(&d));
        for i in 0..3 {
            let a: f64 = d[i];
            assert_relative_eq!(p[(i, i)], (a.exp() - 1.0) / a, max_relative = 1e-13);
        }
    }

    #[test]
    fn matches_invertible_definition() {
        // For invertible Z, phi1(Z) = Z^{-1}(exp(Z) - I); exp via a long
        // plain Taylor sum on a small matrix as the oracle.
        let z = DMatrix::from_row_slice(3, 3, &[0.4, -0.2, 0.1, 0.3, 0.5, -0.6, 0.0, 0.2, -0.3]);
        let mut expm = DMatrix::identity(3, 3);
        let mut term = DMatrix::identity(3, 3);
        for m in 1..40 {
            term = (&term * &z) / m as f64;
            expm += &term;
        }
        let oracle = z
            .clone()
            .lu()
            .solve(&(expm - DMatrix::identity(3, 3)))
            .unwrap();
        assert_relative_eq!(phi1(&z), oracle, epsilon = 1e-13);
    }

    #[test]
    fn scaling_path_agrees_with_direct_series() {
        // Norm ~ 8 forces several squarings; compare against the scalar
        // closed form on a diagonal matrix.
        let d = DVector::from_column_slice(&[8.0, -7.0, 3.5]);
        let p = phi1(&DMatrix::from_diagonal(&d));
        for i in 0..3 {
            let a: f64 = d[i];
            assert_relative_eq!(p[(i, i)], (a.exp() - 1.0) / a, max_relative = 1e-12);
        }
    }

    #[test]
    fn nilpotent_series_is_exact() {
        // Strictly upper-triangular Z with small norm: no scaling, the
        // series truncates at the nilpotency index, and divisions by two
        // are exact in binary, so entries equal the hand-written
        // polynomial I + Z/2 + Z^2/6 bit for bit.
        let s = 0.0183;
        let mut z = DMatrix::zeros(3, 3);
        z[(0, 1)] = s;
        z[(1, 2)] = s;
        let p = phi1(&z);
        let mut expected = DMatrix::identity(3, 3);
        expected[(0, 1)] = s / 2.0;
        expected[(1, 2)] = s / 2.0;
        expected[(0, 2)] = s * s / 6.0;
        assert_eq!(p, expected);
    }

    #[test]
    fn euler_limit() {
        // phi1(Z) v -> v as Z -> 0.
        let z = DMatrix::from_row_slice(2, 2, &[1e-11, -2e-11, 5e-12, 1e-11]);
        let v = DVector::from_column_slice(&[1.0, -2.0]);
        let out = phi1(&z) * &v;
        assert_relative_eq!(out, v, max_relative = 1e-10);
    }
}
