//! Generalised coordinates of motion.
//!
//! A generalised vector stacks a quantity with its temporal derivatives up
//! to some order: block 0 is the value, block 1 its velocity, block 2 its
//! acceleration, and so on. This module provides the stacked vector type,
//! the shift operator that moves every block down one order, the
//! finite-difference lift of raw observations into derivative stacks, the
//! smoothness matrix coupling derivative orders of a stationary
//! squared-exponential noise process, and the Kronecker assembly of
//! generalised precisions.

use crate::dynamics::ModelSpec;
use crate::linalg::{spd_inverse, CholeskyError};
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;

/// A stack of `k` derivative-order blocks, each of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GenVec {
    d: usize,
    k: usize,
    /// Flat storage, block `j` at rows `j*d..(j+1)*d`.
    pub data: DVector<f64>,
}

impl GenVec {
    pub fn zeros(k: usize, d: usize) -> Self {
        assert!(k >= 1 && d >= 1, "GenVec needs k >= 1, d >= 1");
        GenVec {
            d,
            k,
            data: DVector::zeros(k * d),
        }
    }

    pub fn from_blocks(blocks: &[DVector<f64>]) -> Self {
        assert!(!blocks.is_empty(), "GenVec needs at least one block");
        let d = blocks[0].len();
        let mut gv = GenVec::zeros(blocks.len(), d);
        for (j, b) in blocks.iter().enumerate() {
            gv.set_block(j, b);
        }
        gv
    }

    pub fn from_flat(k: usize, d: usize, data: DVector<f64>) -> Self {
        assert_eq!(data.len(), k * d, "flat data length must be k*d");
        GenVec { d, k, data }
    }

    pub fn orders(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.k * self.d
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Owned copy of derivative-order block `j`.
    pub fn block(&self, j: usize) -> DVector<f64> {
        assert!(j < self.k, "block {} out of {} orders", j, self.k);
        self.data.rows(j * self.d, self.d).into_owned()
    }

    /// Block `j` as a fixed-size vector; the module is three-channel.
    pub fn block3(&self, j: usize) -> Vector3<f64> {
        assert_eq!(self.d, 3, "block3 needs d = 3");
        let r = self.data.rows(j * self.d, 3);
        Vector3::new(r[0], r[1], r[2])
    }

    pub fn set_block(&mut self, j: usize, v: &DVector<f64>) {
        assert!(j < self.k, "block {} out of {} orders", j, self.k);
        assert_eq!(v.len(), self.d, "block dimension mismatch");
        self.data.rows_mut(j * self.d, self.d).copy_from(v);
    }

    /// First `k_head` blocks as a new stack.
    pub fn truncated(&self, k_head: usize) -> GenVec {
        assert!(k_head >= 1 && k_head <= self.k);
        GenVec {
            d: self.d,
            k: k_head,
            data: self.data.rows(0, k_head * self.d).into_owned(),
        }
    }
}

/// The block shift operator `D`: identity blocks on the first
/// superdiagonal, zero elsewhere. `D x~` moves every derivative order down
/// by one and zeroes the top order. Strictly upper block-triangular, so
/// `D^k = 0`.
pub fn shift_operator(k: usize, d: usize) -> DMatrix<f64> {
    assert!(k >= 1 && d >= 1, "shift_operator needs k >= 1, d >= 1");
    let mut m = DMatrix::zeros(k * d, k * d);
    for j in 0..k.saturating_sub(1) {
        for r in 0..d {
            m[(j * d + r, (j + 1) * d + r)] = 1.0;
        }
    }
    m
}

/// Lift a window of raw observations to derivative orders by successive
/// backward differences.
///
/// `window` holds the most recent `max_order + 1` observations, oldest
/// first. Each difference level divides by `dt`; order `j` of the result
/// is the newest entry of level `j`.
pub fn generalise_observation(window: &[DVector<f64>], dt: f64, max_order: usize) -> GenVec {
    assert!(dt > 0.0, "dt must be positive");
    assert_eq!(
        window.len(),
        max_order + 1,
        "window must hold max_order + 1 observations"
    );
    let d = window[0].len();
    let mut gv = GenVec::zeros(max_order + 1, d);
    let mut level: Vec<DVector<f64>> = window.to_vec();
    gv.set_block(0, level.last().unwrap());
    for j in 1..=max_order {
        level = level
            .windows(2)
            .map(|pair| (&pair[1] - &pair[0]) / dt)
            .collect();
        gv.set_block(j, level.last().unwrap());
    }
    gv
}

/// Rolling observation window feeding [`generalise_observation`].
///
/// The first push primes the whole window with copies of that observation,
/// so every derivative order starts at zero instead of waiting for history
/// to fill.
#[derive(Debug, Clone)]
pub struct ObsBuffer {
    window: VecDeque<DVector<f64>>,
    capacity: usize,
}

impl ObsBuffer {
    pub fn new(max_order: usize) -> Self {
        ObsBuffer {
            window: VecDeque::new(),
            capacity: max_order + 1,
        }
    }

    pub fn push(&mut self, y: DVector<f64>) {
        if self.window.is_empty() {
            for _ in 0..self.capacity {
                self.window.push_back(y.clone());
            }
        } else {
            self.window.pop_front();
            self.window.push_back(y);
        }
    }

    /// Generalise the current window; panics if nothing was pushed yet.
    pub fn generalised(&self, dt: f64) -> GenVec {
        assert!(!self.window.is_empty(), "ObsBuffer is empty");
        let window: Vec<DVector<f64>> = self.window.iter().cloned().collect();
        generalise_observation(&window, dt, self.capacity - 1)
    }
}

/// Covariance among the first `k` temporal derivatives of a stationary
/// unit-variance process with squared-exponential autocorrelation
/// `rho(tau) = exp(-tau^2 / (2 sigma^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Smoothness {
    pub k: usize,
    pub sigma: f64,
    pub matrix: DMatrix<f64>,
}

/// Build the smoothness matrix. Entry `(i, j)` is `(-1)^j rho^(i+j)(0)`;
/// odd-order derivatives of `rho` vanish at zero, so entries with odd
/// `i + j` are exactly zero, and `rho^(2m)(0) = (-1)^m (2m-1)!! sigma^-2m`.
pub fn smoothness_matrix(k: usize, sigma: f64) -> Smoothness {
    assert!(k >= 1, "smoothness_matrix needs k >= 1");
    assert!(sigma > 0.0, "smoothness_matrix needs sigma > 0");
    let s2 = sigma * sigma;
    let mut m = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            if (i + j) % 2 != 0 {
                continue;
            }
            let ord = (i + j) / 2;
            // (2m-1)!! with the empty product equal to 1.
            let mut dfact = 1.0;
            for q in 1..=ord {
                dfact *= (2 * q - 1) as f64;
            }
            let sign = if (j + ord) % 2 == 0 { 1.0 } else { -1.0 };
            m[(i, j)] = sign * dfact / s2.powi(ord as i32);
        }
    }
    Smoothness {
        k,
        sigma,
        matrix: m,
    }
}

/// How the smoothness matrix enters the generalised precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionConvention {
    /// Treat `S` as the derivative covariance it is described as, so the
    /// precision factor is its inverse. Default.
    #[default]
    InverseSmoothness,
    /// Use `S` itself as the precision factor, reading the Kronecker
    /// product literally.
    LiteralKronecker,
}

/// The order-coupling weight matrix: `S^{-1}` or `S` per convention.
pub fn order_weights(
    s: &Smoothness,
    convention: PrecisionConvention,
) -> Result<DMatrix<f64>, CholeskyError> {
    match convention {
        PrecisionConvention::InverseSmoothness => spd_inverse(&s.matrix),
        PrecisionConvention::LiteralKronecker => Ok(s.matrix.clone()),
    }
}

/// Generalised precision `W (x) Pi` where `W` follows the convention and
/// `Pi` is the marginal (per-channel) precision.
pub fn generalised_precision(
    s: &Smoothness,
    marginal_precision: &DMatrix<f64>,
    convention: PrecisionConvention,
) -> Result<DMatrix<f64>, CholeskyError> {
    Ok(order_weights(s, convention)?.kronecker(marginal_precision))
}

/// Generalised drift stack: block 0 is `f(mu^0)`, block `j >= 1` is the
/// local-linear propagation `J_f(mu^0) mu^(j)`.
pub fn generalised_drift(model: &ModelSpec, mu: &GenVec, theta: &[f64]) -> GenVec {
    let pos = mu.block3(0);
    let mut out = GenVec::zeros(mu.orders(), mu.dim());
    let f0 = model.drift(&pos, theta);
    out.set_block(0, &DVector::from_column_slice(f0.as_slice()));
    if mu.orders() > 1 {
        let jac = model.drift_jacobian(&pos, theta);
        for j in 1..mu.orders() {
            let propagated = jac * mu.block3(j);
            out.set_block(j, &DVector::from_column_slice(propagated.as_slice()));
        }
    }
    out
}

/// Generalised observation map for the identity `g`: the first `k_y`
/// blocks of the state stack, since `g(mu^0) = mu^0` and the Jacobian of
/// `g` is the identity on every higher order.
pub fn generalised_observation_map(mu: &GenVec, k_y: usize) -> GenVec {
    mu.truncated(k_y)
}
