//! Laplace-approximated variational free energy.
//!
//! The objective splits into a complexity group (state-dynamics,
//! parameter, and log-precision errors, plus posterior and prior
//! log-determinants) minus an accuracy group (observation errors and the
//! observation-precision log-determinant):
//!
//! ```text
//! F_L = 1/2 (eps_x' Px eps_x + eps_th' Pth eps_th + eps_la' Pla eps_la
//!            + ln|Sig_x| + ln|Sig_th| + ln|Sig_la|
//!            + ln|Px~| + ln|Pth| + ln|Pla|)
//!     - 1/2 (-eps_y' Py~ eps_y + ln|Py~| - d_y k_y ln 2pi)
//! ```
//!
//! Generalised precisions have Kronecker structure: an order-coupling
//! weight from the smoothness matrix times a diagonal per-channel
//! precision `diag(exp(lambda))`. The state-error stack has one block
//! fewer than the state itself (the top order carries no dynamics
//! constraint), so its quadratic form uses the leading principal submatrix
//! of the full generalised precision, while the log-determinant keeps the
//! full matrix and hence multiplicity `k_x` per state channel.
//!
//! Gradients with respect to the three posterior means are closed-form,
//! holding every covariance fixed. Curvature blocks are closed-form for
//! parameters (the drifts are linear in their learnable parameters) and
//! log-precisions; the exact state block comes from a central finite
//! difference of the analytic state gradient, and `state_curvature` gives
//! its always-positive-definite local-linearity counterpart for the run
//! loop.

use crate::dynamics::{ModelSpec, DIM};
use crate::gcm::{self, GenVec, PrecisionConvention};
use crate::linalg::{spd_log_det, CholeskyError};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use std::f64::consts::PI;
use std::fmt;

/// Step scale for the finite-difference curvature of the state block.
const FD_HESS_STEP: f64 = 1e-4;

/// A generative model bound to its generalised-coordinate order and
/// smoothness weighting. Built once per run; the weight matrices and their
/// log-determinants are cached here.
#[derive(Debug, Clone)]
pub struct GenModel {
    pub model: ModelSpec,
    pub k_x: usize,
    pub smooth_sigma: f64,
    pub convention: PrecisionConvention,
    /// Order-coupling weights for the full state stack (k_x orders).
    weight_x: DMatrix<f64>,
    /// Leading principal submatrix of `weight_x` for the (k_x - 1)-block
    /// state-error quadratic.
    weight_x_sub: DMatrix<f64>,
    /// Order-coupling weights for the observation stack (k_y orders).
    weight_y: DMatrix<f64>,
    logdet_weight_x: f64,
    logdet_weight_y: f64,
}

impl GenModel {
    pub fn new(
        model: ModelSpec,
        k_x: usize,
        smooth_sigma: f64,
        convention: PrecisionConvention,
    ) -> Result<Self, CholeskyError> {
        assert!(k_x >= 2, "the state stack needs at least two orders");
        let s_x = gcm::smoothness_matrix(k_x, smooth_sigma);
        let s_y = gcm::smoothness_matrix(k_x - 1, smooth_sigma);
        let weight_x = gcm::order_weights(&s_x, convention)?;
        let weight_y = gcm::order_weights(&s_y, convention)?;
        let logdet_weight_x = spd_log_det(&weight_x)?;
        let logdet_weight_y = spd_log_det(&weight_y)?;
        let weight_x_sub = weight_x.view((0, 0), (k_x - 1, k_x - 1)).into_owned();
        Ok(GenModel {
            model,
            k_x,
            smooth_sigma,
            convention,
            weight_x,
            weight_x_sub,
            weight_y,
            logdet_weight_x,
            logdet_weight_y,
        })
    }

    pub fn k_y(&self) -> usize {
        self.k_x - 1
    }

    pub fn d(&self) -> usize {
        DIM
    }

    /// Full generalised state precision `W_x (x) diag(exp(lambda_x))`.
    pub fn state_precision(&self, lambda_x: &DVector<f64>) -> DMatrix<f64> {
        let pi = DMatrix::from_diagonal(&lambda_x.map(f64::exp));
        self.weight_x.kronecker(&pi)
    }
}

/// Mean-field posterior over states, parameters, and log-precisions,
/// together with the current parameter and log-precision priors.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    pub mu_x: GenVec,
    pub sigma_x: DMatrix<f64>,
    pub mu_theta: DVector<f64>,
    pub sigma_theta: DMatrix<f64>,
    pub eta_theta: DVector<f64>,
    pub pi_theta: DMatrix<f64>,
    /// Layout: the d state channels first, then the d observation channels.
    pub mu_lambda: DVector<f64>,
    pub sigma_lambda: DMatrix<f64>,
    pub eta_lambda: DVector<f64>,
    pub pi_lambda: DMatrix<f64>,
}

impl BeliefState {
    pub fn lambda_x(&self) -> DVector<f64> {
        self.mu_lambda.rows(0, DIM).into_owned()
    }

    pub fn lambda_y(&self) -> DVector<f64> {
        self.mu_lambda.rows(DIM, DIM).into_owned()
    }
}

/// Generalised prediction errors plus the two prior deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionErrors {
    /// k_y blocks: observation stack minus the mapped state stack.
    pub eps_y: GenVec,
    /// k_x - 1 blocks: shifted state stack minus the generalised drift.
    pub eps_x: GenVec,
    pub eps_theta: DVector<f64>,
    pub eps_lambda: DVector<f64>,
}

/// The objective and its split. `total = complexity - accuracy` by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VfeValue {
    pub total: f64,
    pub accuracy: f64,
    pub complexity: f64,
}

/// A covariance or prior-precision block failed its Cholesky audit.
#[derive(Debug, Clone, PartialEq)]
pub struct VfeError {
    pub block: &'static str,
    pub source: CholeskyError,
}

impl fmt::Display for VfeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "block {}: {}", self.block, self.source)
    }
}

impl std::error::Error for VfeError {}

/// Assemble all prediction errors at the current belief.
pub fn prediction_errors(belief: &BeliefState, y_gen: &GenVec, gm: &GenModel) -> PredictionErrors {
    assert_eq!(y_gen.orders(), gm.k_y(), "observation stack order mismatch");
    assert_eq!(belief.mu_x.orders(), gm.k_x, "state stack order mismatch");
    let d = gm.d();

    // Identity g: the mapped state stack is the state stack itself.
    let mut eps_y = GenVec::zeros(gm.k_y(), d);
    for j in 0..gm.k_y() {
        eps_y.set_block(j, &(y_gen.block(j) - belief.mu_x.block(j)));
    }

    let theta = belief.mu_theta.as_slice();
    let drift = gcm::generalised_drift(&gm.model, &belief.mu_x, theta);
    let mut eps_x = GenVec::zeros(gm.k_x - 1, d);
    for j in 0..gm.k_x - 1 {
        eps_x.set_block(j, &(belief.mu_x.block(j + 1) - drift.block(j)));
    }

    PredictionErrors {
        eps_y,
        eps_x,
        eps_theta: &belief.mu_theta - &belief.eta_theta,
        eps_lambda: &belief.mu_lambda - &belief.eta_lambda,
    }
}

/// Per-channel order-weighted squares: `w[c] = sum_{j,j'} W[j,j'] *
/// eps[j][c] * eps[j'][c]`. Multiplying by `exp(lambda_c)` and summing
/// over channels gives the full quadratic form under the Kronecker
/// precision.
fn channel_quadratics(eps: &GenVec, weight: &DMatrix<f64>) -> DVector<f64> {
    let d = eps.dim();
    let k = eps.orders();
    let mut w = DVector::zeros(d);
    for j in 0..k {
        for j2 in 0..k {
            let coef = weight[(j, j2)];
            if coef == 0.0 {
                continue;
            }
            for c in 0..d {
                w[c] += coef * eps.data[j * d + c] * eps.data[j2 * d + c];
            }
        }
    }
    w
}

/// Order-weighted, precision-scaled error blocks:
/// `u[j] = diag(exp(lambda)) sum_{j'} W[j,j'] eps[j']`.
fn weighted_blocks(eps: &GenVec, weight: &DMatrix<f64>, pi: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let k = eps.orders();
    (0..k)
        .map(|j| {
            let mut acc = Vector3::zeros();
            for j2 in 0..k {
                let coef = weight[(j, j2)];
                if coef != 0.0 {
                    acc += coef * eps.block3(j2);
                }
            }
            acc.component_mul(pi)
        })
        .collect()
}

/// Evaluate the objective from pre-computed errors.
pub fn laplace_vfe(
    errors: &PredictionErrors,
    belief: &BeliefState,
    gm: &GenModel,
) -> Result<VfeValue, VfeError> {
    let d = gm.d() as f64;
    let k_y = gm.k_y() as f64;
    let k_x = gm.k_x as f64;
    let lam_x = belief.lambda_x();
    let lam_y = belief.lambda_y();

    let w_y = channel_quadratics(&errors.eps_y, &gm.weight_y);
    let w_x = channel_quadratics(&errors.eps_x, &gm.weight_x_sub);
    let quad_y: f64 = (0..DIM).map(|c| lam_y[c].exp() * w_y[c]).sum();
    let quad_x: f64 = (0..DIM).map(|c| lam_x[c].exp() * w_x[c]).sum();
    let quad_theta = (&belief.pi_theta * &errors.eps_theta).dot(&errors.eps_theta);
    let quad_lambda = (&belief.pi_lambda * &errors.eps_lambda).dot(&errors.eps_lambda);

    let logdet_pi_y = d * gm.logdet_weight_y + k_y * lam_y.sum();
    let logdet_pi_x = d * gm.logdet_weight_x + k_x * lam_x.sum();

    let audit = |m: &DMatrix<f64>, block: &'static str| {
        spd_log_det(m).map_err(|source| VfeError { block, source })
    };
    let ld_sigma_x = audit(&belief.sigma_x, "Sigma_x")?;
    let ld_sigma_theta = audit(&belief.sigma_theta, "Sigma_theta")?;
    let ld_sigma_lambda = audit(&belief.sigma_lambda, "Sigma_lambda")?;
    let ld_pi_theta = audit(&belief.pi_theta, "Pi_theta")?;
    let ld_pi_lambda = audit(&belief.pi_lambda, "Pi_lambda")?;

    let complexity = 0.5
        * (quad_x
            + quad_theta
            + quad_lambda
            + ld_sigma_x
            + ld_sigma_theta
            + ld_sigma_lambda
            + logdet_pi_x
            + ld_pi_theta
            + ld_pi_lambda);
    let accuracy = 0.5 * (-quad_y + logdet_pi_y - d * k_y * (2.0 * PI).ln());
    Ok(VfeValue {
        total: complexity - accuracy,
        accuracy,
        complexity,
    })
}

/// Errors plus evaluation in one call.
pub fn evaluate(belief: &BeliefState, y_gen: &GenVec, gm: &GenModel) -> Result<VfeValue, VfeError> {
    laplace_vfe(&prediction_errors(belief, y_gen, gm), belief, gm)
}

/// Gradients of the objective with respect to the three posterior means,
/// covariances held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct VfeGradients {
    pub g_x: DVector<f64>,
    pub g_theta: DVector<f64>,
    pub g_lambda: DVector<f64>,
}

/// The state-block gradient alone; shared by the full gradient assembly
/// and the finite-difference curvature loop.
fn state_gradient(
    mu_x: &GenVec,
    theta: &[f64],
    pi_x: &Vector3<f64>,
    pi_y: &Vector3<f64>,
    y_gen: &GenVec,
    gm: &GenModel,
) -> DVector<f64> {
    let k_x = gm.k_x;
    let d = gm.d();

    let mut eps_y = GenVec::zeros(k_x - 1, d);
    for j in 0..k_x - 1 {
        eps_y.set_block(j, &(y_gen.block(j) - mu_x.block(j)));
    }
    let drift = gcm::generalised_drift(&gm.model, mu_x, theta);
    let mut eps_x = GenVec::zeros(k_x - 1, d);
    for j in 0..k_x - 1 {
        eps_x.set_block(j, &(mu_x.block(j + 1) - drift.block(j)));
    }

    let u_y = weighted_blocks(&eps_y, &gm.weight_y, pi_y);
    let u_x = weighted_blocks(&eps_x, &gm.weight_x_sub, pi_x);

    let pos = mu_x.block3(0);
    let jac_t = gm.model.drift_jacobian(&pos, theta).transpose();

    let mut g = DVector::zeros(k_x * d);
    // Position block: observation pull, drift pull, and the curvature of
    // the higher-order propagation terms J_f(mu^0) mu^(j).
    let mut g0 = -u_y[0] - jac_t * u_x[0];
    for j in 1..k_x - 1 {
        let hmat = gm.model.drift_hessian_apply(&pos, theta, &mu_x.block3(j));
        g0 -= hmat.transpose() * u_x[j];
    }
    g.rows_mut(0, d).copy_from_slice(g0.as_slice());
    // Interior orders: appear in eps_y[m], eps_x[m-1] (positively), and
    // eps_x[m] through the propagation.
    for m in 1..k_x - 1 {
        let gm_block = -u_y[m] + u_x[m - 1] - jac_t * u_x[m];
        g.rows_mut(m * d, d).copy_from_slice(gm_block.as_slice());
    }
    // Top order: only eps_x[k_x - 2] sees it.
    g.rows_mut((k_x - 1) * d, d)
        .copy_from_slice(u_x[k_x - 2].as_slice());
    g
}

/// All three mean gradients at the current belief.
pub fn vfe_gradients(belief: &BeliefState, y_gen: &GenVec, gm: &GenModel) -> VfeGradients {
    let d = gm.d();
    let k_x = gm.k_x;
    let errors = prediction_errors(belief, y_gen, gm);
    let pi_x_v = {
        let l = belief.lambda_x();
        Vector3::new(l[0].exp(), l[1].exp(), l[2].exp())
    };
    let pi_y_v = {
        let l = belief.lambda_y();
        Vector3::new(l[0].exp(), l[1].exp(), l[2].exp())
    };
    let theta = belief.mu_theta.as_slice();

    let g_x = state_gradient(&belief.mu_x, theta, &pi_x_v, &pi_y_v, y_gen, gm);

    // Parameter gradient: the state-error stack is linear in theta for
    // both drift families, with block-row sensitivities -dF/dtheta.
    let u_x = weighted_blocks(&errors.eps_x, &gm.weight_x_sub, &pi_x_v);
    let pos = belief.mu_x.block3(0);
    let p = gm.model.param_dim();
    let mut g_theta = &belief.pi_theta * &errors.eps_theta;
    for j in 0..k_x - 1 {
        let sens = if j == 0 {
            gm.model.drift_param_grad(&pos, theta)
        } else {
            gm.model
                .drift_jacobian_param_grad(&pos, theta, &belief.mu_x.block3(j))
        };
        for q in 0..p {
            let mut dot = 0.0;
            for r in 0..d {
                dot += sens[(r, q)] * u_x[j][r];
            }
            g_theta[q] -= dot;
        }
    }

    // Log-precision gradient: quadratic response, log-determinant
    // multiplicity (k_x per state channel from the full Kronecker
    // determinant, k_y per observation channel entering through the
    // accuracy group), and the prior pull.
    let w_y = channel_quadratics(&errors.eps_y, &gm.weight_y);
    let w_x = channel_quadratics(&errors.eps_x, &gm.weight_x_sub);
    let prior_pull = &belief.pi_lambda * &errors.eps_lambda;
    let lam_x = belief.lambda_x();
    let lam_y = belief.lambda_y();
    let mut g_lambda = DVector::zeros(2 * d);
    for c in 0..d {
        g_lambda[c] = 0.5 * lam_x[c].exp() * w_x[c] + 0.5 * k_x as f64 + prior_pull[c];
        g_lambda[d + c] = 0.5 * lam_y[c].exp() * w_y[c] - 0.5 * gm.k_y() as f64 + prior_pull[d + c];
    }

    VfeGradients {
        g_x,
        g_theta,
        g_lambda,
    }
}

/// Which curvature block of the joint negative log-density to form.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HessianBlock {
    XX,
    ThetaTheta,
    LambdaLambda,
}

/// Curvature of the state block by central finite differences of the
/// analytic state gradient, symmetrised.
pub fn hessian_xx(belief: &BeliefState, y_gen: &GenVec, gm: &GenModel) -> DMatrix<f64> {
    let n = gm.k_x * gm.d();
    let pi_x_v = {
        let l = belief.lambda_x();
        Vector3::new(l[0].exp(), l[1].exp(), l[2].exp())
    };
    let pi_y_v = {
        let l = belief.lambda_y();
        Vector3::new(l[0].exp(), l[1].exp(), l[2].exp())
    };
    let theta = belief.mu_theta.as_slice();

    let mut h = DMatrix::zeros(n, n);
    let mut mu = belief.mu_x.clone();
    for i in 0..n {
        let base = belief.mu_x.data[i];
        let step = FD_HESS_STEP * base.abs().max(1.0);
        mu.data[i] = base + step;
        let g_plus = state_gradient(&mu, theta, &pi_x_v, &pi_y_v, y_gen, gm);
        mu.data[i] = base - step;
        let g_minus = state_gradient(&mu, theta, &pi_x_v, &pi_y_v, y_gen, gm);
        mu.data[i] = base;
        h.set_column(i, &((g_plus - g_minus) / (2.0 * step)));
    }
    // Symmetrise away the finite-difference asymmetry.
    let ht = h.transpose();
    (h + ht) * 0.5
}

/// State curvature under the local linearity assumption: the drift's own
/// second derivatives are dropped, leaving the precision-weighted
/// Gauss-Newton form, positive definite by construction. This is the
/// matrix the run loop feeds to the step regulariser and the state
/// covariance refresh; `hessian_xx` keeps the exact curvature. The two
/// coincide whenever the drift is linear, and at k_x = 2 whenever the
/// prediction errors vanish.
pub fn state_curvature(belief: &BeliefState, gm: &GenModel) -> DMatrix<f64> {
    let d = gm.d();
    let k_x = gm.k_x;
    let pi_x: Vector3<f64> = {
        let l = belief.lambda_x();
        Vector3::new(l[0].exp(), l[1].exp(), l[2].exp())
    };
    let pi_y: Vector3<f64> = {
        let l = belief.lambda_y();
        Vector3::new(l[0].exp(), l[1].exp(), l[2].exp())
    };
    let jf = gm
        .model
        .drift_jacobian(&belief.mu_x.block3(0), belief.mu_theta.as_slice());

    let pi_j = Matrix3::from_fn(|r, c| pi_x[r] * jf[(r, c)]);
    let jt_pi_j = jf.transpose() * &pi_j;

    let mut h = DMatrix::zeros(k_x * d, k_x * d);
    let mut add = |a: usize, b: usize, block: &Matrix3<f64>| {
        let mut view = h.view_mut((a * d, b * d), (d, d));
        view += block;
    };

    for a in 0..gm.k_y() {
        for b in 0..gm.k_y() {
            let w = gm.weight_y[(a, b)];
            if w != 0.0 {
                add(a, b, &Matrix3::from_diagonal(&(w * pi_y)));
            }
        }
    }
    // Error block j couples belief orders j (through -J_f) and j+1.
    for j in 0..k_x - 1 {
        for j2 in 0..k_x - 1 {
            let w = gm.weight_x_sub[(j, j2)];
            if w == 0.0 {
                continue;
            }
            add(j + 1, j2 + 1, &Matrix3::from_diagonal(&(w * pi_x)));
            add(j + 1, j2, &(-w * &pi_j));
            add(j, j2 + 1, &(-w * pi_j.transpose()));
            add(j, j2, &(w * &jt_pi_j));
        }
    }
    // Remove last-ulp asymmetry from the triple products.
    let ht = h.transpose();
    (h + ht) * 0.5
}

/// Curvature of the parameter block. Exact: the state-error stack is
/// linear in the learnable parameters for both families, so the
/// Gauss-Newton form has no remainder and the observations drop out.
pub fn hessian_theta(belief: &BeliefState, _y_gen: &GenVec, gm: &GenModel) -> DMatrix<f64> {
    let d = gm.d();
    let p = gm.model.param_dim();
    let theta = belief.mu_theta.as_slice();
    let pos = belief.mu_x.block3(0);
    let lam_x = belief.lambda_x();

    // Block-row sensitivities of the drift stack.
    let sens: Vec<DMatrix<f64>> = (0..gm.k_x - 1)
        .map(|j| {
            if j == 0 {
                gm.model.drift_param_grad(&pos, theta)
            } else {
                gm.model
                    .drift_jacobian_param_grad(&pos, theta, &belief.mu_x.block3(j))
            }
        })
        .collect();

    let mut h = belief.pi_theta.clone();
    for j in 0..gm.k_x - 1 {
        for j2 in 0..gm.k_x - 1 {
            let coef = gm.weight_x_sub[(j, j2)];
            if coef == 0.0 {
                continue;
            }
            for q in 0..p {
                for q2 in 0..p {
                    let mut dot = 0.0;
                    for r in 0..d {
                        dot += sens[j][(r, q)] * lam_x[r].exp() * sens[j2][(r, q2)];
                    }
                    h[(q, q2)] += coef * dot;
                }
            }
        }
    }
    h
}

/// Curvature of the log-precision block: diagonal quadratic response plus
/// the prior precision. The log-determinant terms are linear in lambda and
/// contribute nothing.
pub fn hessian_lambda(belief: &BeliefState, y_gen: &GenVec, gm: &GenModel) -> DMatrix<f64> {
    let d = gm.d();
    let errors = prediction_errors(belief, y_gen, gm);
    let w_y = channel_quadratics(&errors.eps_y, &gm.weight_y);
    let w_x = channel_quadratics(&errors.eps_x, &gm.weight_x_sub);
    let lam_x = belief.lambda_x();
    let lam_y = belief.lambda_y();
    let mut h = belief.pi_lambda.clone();
    for c in 0..d {
        h[(c, c)] += 0.5 * lam_x[c].exp() * w_x[c];
        h[(d + c, d + c)] += 0.5 * lam_y[c].exp() * w_y[c];
    }
    h
}

/// Dispatch on the requested curvature block.
pub fn hessian_block(
    belief: &BeliefState,
    y_gen: &GenVec,
    gm: &GenModel,
    which: HessianBlock,
) -> DMatrix<f64> {
    match which {
        HessianBlock::XX => hessian_xx(belief, y_gen, gm),
        HessianBlock::ThetaTheta => hessian_theta(belief, y_gen, gm),
        HessianBlock::LambdaLambda => hessian_lambda(belief, y_gen, gm),
    }
}
