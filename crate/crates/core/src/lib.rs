//! Online triple estimation for nonlinear state-space models in generalised
//! coordinates of motion.
//!
//! The toolkit covers the full loop: simulate a ground-truth process with
//! smooth (convolved) noise, lift observations into generalised coordinates,
//! score beliefs with a Laplace-form variational free energy, and run the
//! online filter that interleaves a local-linearisation state update with
//! stochastic-approximation parameter and log-precision updates. A sweep
//! harness drives grids of filter configurations and selects models by
//! accumulated free action.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`dynamics`]: the two drift families (Lorenz, antisymmetric GLV) with
//!   analytic Jacobians and parameter sensitivities
//! - [`simulate`]: smooth-noise generation, Euler integration, dataset files
//! - [`gcm`]: generalised vectors, the shift operator, observation
//!   generalisation, smoothness matrices and generalised precisions
//! - [`vfe`]: prediction errors, the free-energy value and its gradients and
//!   curvature blocks
//! - [`odem`]: the online filter loop and its run records
//! - [`harness`]: grid sweeps, model selection, MSE, report tables

pub mod dynamics;
pub mod gcm;
pub mod harness;
pub mod matexp;
pub mod odem;
pub mod simulate;
pub mod vfe;

mod linalg;

pub use linalg::CholeskyError;
