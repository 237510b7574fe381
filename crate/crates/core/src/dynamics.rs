//! Drift families for the generating process and the generative model.
//!
//! Both families are three-channel with an identity observation map, so
//! `d_x = d_y = 3` throughout. The Lorenz family fixes `sigma` and `beta`
//! and learns the Rayleigh parameter `rho`; the generalised Lotka-Volterra
//! family couples its species through an antisymmetric interaction matrix
//! built from three free entries `(a12, a13, a23)` and has no growth term.
//!
//! Every derivative needed by the filter is closed-form: the state Jacobian
//! `∂f/∂x`, the parameter sensitivity `∂f/∂θ`, and because both drifts are
//! bilinear in the state, the directional second derivative `∂(∂f/∂x · v)/∂x`
//! and the mixed sensitivity `∂(∂f/∂x · v)/∂θ`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Channel count shared by both families.
pub const DIM: usize = 3;

/// A drift family together with its fixed constants.
///
/// The learnable parameter vector `theta` is separate: length 1 (`rho`) for
/// Lorenz, length 3 (`a12, a13, a23`) for GLV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ModelSpec {
    /// Lorenz system with `sigma`, `beta` fixed and `rho` learnable.
    Lorenz { sigma: f64, beta: f64 },
    /// Antisymmetric three-species generalised Lotka-Volterra,
    /// `x' = x ∘ Ax` with zero growth rates.
    Glv,
}

/// Independent Gaussian priors over the learnable parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamPrior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl ParamPrior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    /// Diagonal prior precision, `1/var` per component.
    pub fn precision_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(
            self.var.len(),
            self.var.iter().map(|v| 1.0 / v),
        ))
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.var))
    }
}

/// Antisymmetric interaction matrix from its three free entries.
///
/// ```text
/// A = [  0    a12   a13 ]
///     [ -a12   0    a23 ]
///     [ -a13 -a23    0  ]
/// ```
pub fn antisymmetric_interaction(a12: f64, a13: f64, a23: f64) -> Matrix3<f64> {
    Matrix3::new(0.0, a12, a13, -a12, 0.0, a23, -a13, -a23, 0.0)
}

/// Basis matrices `∂A/∂a12`, `∂A/∂a13`, `∂A/∂a23`.
fn glv_basis(q: usize) -> Matrix3<f64> {
    match q {
        0 => antisymmetric_interaction(1.0, 0.0, 0.0),
        1 => antisymmetric_interaction(0.0, 1.0, 0.0),
        _ => antisymmetric_interaction(0.0, 0.0, 1.0),
    }
}

impl ModelSpec {
    /// Lorenz with the standard fixed constants `sigma = 10`, `beta = 8/3`.
    pub fn lorenz() -> Self {
        ModelSpec::Lorenz {
            sigma: 10.0,
            beta: 8.0 / 3.0,
        }
    }

    pub fn glv() -> Self {
        ModelSpec::Glv
    }

    /// Number of learnable parameters.
    pub fn param_dim(&self) -> usize {
        match self {
            ModelSpec::Lorenz { .. } => 1,
            ModelSpec::Glv => 3,
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            ModelSpec::Lorenz { .. } => &["rho"],
            ModelSpec::Glv => &["a12", "a13", "a23"],
        }
    }

    /// Short family tag used in file headers.
    pub fn family_name(&self) -> &'static str {
        match self {
            ModelSpec::Lorenz { .. } => "lorenz",
            ModelSpec::Glv => "glv",
        }
    }

    /// Parameter values that generate the ground-truth datasets.
    pub fn true_params(&self) -> Vec<f64> {
        match self {
            ModelSpec::Lorenz { .. } => vec![28.0],
            ModelSpec::Glv => vec![0.2, -0.4, 0.1],
        }
    }

    /// Default parameter priors for the generative model.
    pub fn default_prior(&self) -> ParamPrior {
        match self {
            ModelSpec::Lorenz { .. } => ParamPrior {
                mean: vec![30.0],
                var: vec![81.0],
            },
            ModelSpec::Glv => ParamPrior {
                mean: vec![0.3, -0.2, 0.3],
                var: vec![0.0625, 0.0625, 0.0625],
            },
        }
    }

    /// Drift field `f(x; theta)`.
    pub fn drift(&self, x: &Vector3<f64>, theta: &[f64]) -> Vector3<f64> {
        assert_eq!(theta.len(), self.param_dim(), "theta length mismatch");
        match self {
            ModelSpec::Lorenz { sigma, beta } => {
                let rho = theta[0];
                Vector3::new(
                    sigma * (x[1] - x[0]),
                    x[0] * (rho - x[2]) - x[1],
                    x[0] * x[1] - beta * x[2],
                )
            }
            ModelSpec::Glv => {
                let a = antisymmetric_interaction(theta[0], theta[1], theta[2]);
                (a * x).component_mul(x)
            }
        }
    }

    /// State Jacobian `∂f/∂x` (3x3).
    pub fn drift_jacobian(&self, x: &Vector3<f64>, theta: &[f64]) -> Matrix3<f64> {
        assert_eq!(theta.len(), self.param_dim(), "theta length mismatch");
        match self {
            ModelSpec::Lorenz { sigma, beta } => {
                let rho = theta[0];
                Matrix3::new(
                    -sigma,
                    *sigma,
                    0.0, //
                    rho - x[2],
                    -1.0,
                    -x[0], //
                    x[1],
                    x[0],
                    -beta,
                )
            }
            ModelSpec::Glv => {
                let a = antisymmetric_interaction(theta[0], theta[1], theta[2]);
                Matrix3::from_diagonal(&(a * x)) + Matrix3::from_diagonal(x) * a
            }
        }
    }

    /// Parameter sensitivity `∂f/∂θ` (3 x p), one column per parameter.
    pub fn drift_param_grad(&self, x: &Vector3<f64>, theta: &[f64]) -> DMatrix<f64> {
        assert_eq!(theta.len(), self.param_dim(), "theta length mismatch");
        match self {
            ModelSpec::Lorenz { .. } => DMatrix::from_column_slice(DIM, 1, &[0.0, x[0], 0.0]),
            ModelSpec::Glv => {
                let mut g = DMatrix::zeros(DIM, 3);
                for q in 0..3 {
                    let col = (glv_basis(q) * x).component_mul(x);
                    g.column_mut(q).copy_from(&col);
                }
                g
            }
        }
    }

    /// Directional curvature `∂(∂f/∂x · v)/∂x` (3x3).
    ///
    /// Both drifts are bilinear in the state, so this is exact and
    /// independent of `x` up to the terms written here.
    pub fn drift_hessian_apply(
        &self,
        _x: &Vector3<f64>,
        theta: &[f64],
        v: &Vector3<f64>,
    ) -> Matrix3<f64> {
        assert_eq!(theta.len(), self.param_dim(), "theta length mismatch");
        match self {
            ModelSpec::Lorenz { .. } => Matrix3::new(
                0.0, 0.0, 0.0, //
                -v[2], 0.0, -v[0], //
                v[1], v[0], 0.0,
            ),
            ModelSpec::Glv => {
                let a = antisymmetric_interaction(theta[0], theta[1], theta[2]);
                Matrix3::from_diagonal(&(a * v)) + Matrix3::from_diagonal(v) * a
            }
        }
    }

    /// Mixed sensitivity `∂(∂f/∂x · v)/∂θ` (3 x p), one column per parameter.
    pub fn drift_jacobian_param_grad(
        &self,
        x: &Vector3<f64>,
        theta: &[f64],
        v: &Vector3<f64>,
    ) -> DMatrix<f64> {
        assert_eq!(theta.len(), self.param_dim(), "theta length mismatch");
        match self {
            ModelSpec::Lorenz { .. } => {
                // ∂(∂f/∂x)/∂rho has a single nonzero entry at (1, 0).
                let _ = x;
                DMatrix::from_column_slice(DIM, 1, &[0.0, v[0], 0.0])
            }
            ModelSpec::Glv => {
                let mut g = DMatrix::zeros(DIM, 3);
                for q in 0..3 {
                    let b = glv_basis(q);
                    let col =
                        Matrix3::from_diagonal(&(b * x)) * v + Matrix3::from_diagonal(x) * (b * v);
                    g.column_mut(q).copy_from(&col);
                }
                g
            }
        }
    }
}
