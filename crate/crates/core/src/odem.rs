//! The online filtering loop.
//!
//! Each observation is consumed exactly once: generalise it, move the
//! state belief with one Ozaki step, fold the parameter and log-precision
//! gradients into exponential accumulators, fire an E/M step on the fixed
//! interval schedule (with a Robbins-Monro rate and a prior hand-off that
//! re-centres and hardens the priors), refresh the state covariance from
//! local curvature, and accumulate the free action.
//!
//! A run is strictly sequential and never shares its belief; concurrency
//! lives one level up in the sweep harness.

use crate::dynamics::{ModelSpec, ParamPrior, DIM};
use crate::gcm::{self, GenVec, ObsBuffer, PrecisionConvention};
use crate::linalg::{covariance_from_curvature, spd_inverse, spectral_radius_estimate};
use crate::matexp;
use crate::simulate::{Dataset, DatasetMeta};
use crate::vfe::{self, BeliefState, GenModel, VfeError, VfeValue};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

/// File-format tag checked on load.
const RECORD_MAGIC: &str = "# odem-run v1";

/// Power iterations used for every spectral-radius estimate.
const POWER_ITERS: usize = 5;

/// Robbins-Monro schedule `alpha / (j + t0)^gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RmSchedule {
    pub alpha: f64,
    pub t0: f64,
    pub gamma: f64,
}

impl Default for RmSchedule {
    fn default() -> Self {
        RmSchedule {
            alpha: 0.0001,
            t0: 10.0,
            gamma: 0.3,
        }
    }
}

impl RmSchedule {
    /// Learning rate for the j-th event, j >= 1.
    pub fn rate(&self, j: usize) -> f64 {
        self.alpha / (j as f64 + self.t0).powf(self.gamma)
    }
}

/// Full tuning configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdemConfig {
    pub k_x: usize,
    pub k_y: usize,
    /// Lagrange multiplier weighting the gradient against the shift flow.
    pub kappa: f64,
    /// Observations between E/M events.
    pub inter_em: usize,
    pub beta_lambda: f64,
    pub beta_theta: f64,
    pub rm_lambda: RmSchedule,
    pub rm_theta: RmSchedule,
    /// Log step size; the actual step is exp(nu) / curvature scale.
    pub nu: f64,
    /// Observation-to-state precision prior ratio (E_pi_y = ratio_c * e_pi_x).
    pub ratio_c: f64,
    pub e_pi_x: f64,
    pub sigma_lambda_x: f64,
    pub sigma_lambda_y: f64,
    pub smooth_sigma: f64,
    pub convention: PrecisionConvention,
    /// Recorded for provenance; the loop itself draws no randomness.
    pub seed: u64,
}

impl Default for OdemConfig {
    fn default() -> Self {
        OdemConfig {
            k_x: 3,
            k_y: 2,
            kappa: 0.5,
            inter_em: 128,
            beta_lambda: 0.1,
            beta_theta: 0.1,
            rm_lambda: RmSchedule::default(),
            rm_theta: RmSchedule::default(),
            nu: -4.0,
            ratio_c: 1.0,
            e_pi_x: 500.0,
            sigma_lambda_x: 0.1,
            sigma_lambda_y: 0.1,
            smooth_sigma: 0.1,
            convention: PrecisionConvention::default(),
            seed: 0,
        }
    }
}

/// A configuration field failed validation.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config field {}: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

impl OdemConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |field: &'static str, message: String| Err(ConfigError { field, message });
        if self.k_x < 2 {
            return fail(
                "k_x",
                format!("needs at least two orders, got {}", self.k_x),
            );
        }
        if self.k_y + 1 != self.k_x {
            return fail(
                "k_y",
                format!("must equal k_x - 1, got k_x={} k_y={}", self.k_x, self.k_y),
            );
        }
        if self.inter_em == 0 {
            return fail("inter_em", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta_lambda) {
            return fail(
                "beta_lambda",
                format!("must lie in [0, 1), got {}", self.beta_lambda),
            );
        }
        if !(0.0..1.0).contains(&self.beta_theta) {
            return fail(
                "beta_theta",
                format!("must lie in [0, 1), got {}", self.beta_theta),
            );
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return fail(
                "kappa",
                format!("must be finite and non-negative, got {}", self.kappa),
            );
        }
        if !self.nu.is_finite() {
            return fail("nu", format!("must be finite, got {}", self.nu));
        }
        if !(self.ratio_c > 0.0) || !self.ratio_c.is_finite() {
            return fail("ratio_c", format!("must be positive, got {}", self.ratio_c));
        }
        if !(self.e_pi_x > 0.0) || !self.e_pi_x.is_finite() {
            return fail("e_pi_x", format!("must be positive, got {}", self.e_pi_x));
        }
        if !(self.sigma_lambda_x > 0.0) {
            return fail(
                "sigma_lambda_x",
                format!("must be positive, got {}", self.sigma_lambda_x),
            );
        }
        if !(self.sigma_lambda_y > 0.0) {
            return fail(
                "sigma_lambda_y",
                format!("must be positive, got {}", self.sigma_lambda_y),
            );
        }
        if !(self.smooth_sigma > 0.0) {
            return fail(
                "smooth_sigma",
                format!("must be positive, got {}", self.smooth_sigma),
            );
        }
        for (name, rm) in [("rm_lambda", &self.rm_lambda), ("rm_theta", &self.rm_theta)] {
            if !(rm.alpha > 0.0) {
                return fail(name, format!("alpha must be positive, got {}", rm.alpha));
            }
            if !(rm.t0 >= 0.0) {
                return fail(name, format!("t0 must be non-negative, got {}", rm.t0));
            }
            if !(rm.gamma >= 0.0) {
                return fail(
                    name,
                    format!("gamma must be non-negative, got {}", rm.gamma),
                );
            }
        }
        Ok(())
    }
}

/// Exponential gradient smoothing; beta = 0 keeps only the newest value.
pub fn accumulate(acc: &DVector<f64>, grad: &DVector<f64>, beta: f64) -> DVector<f64> {
    beta * acc + (1.0 - beta) * grad
}

/// Starting belief: the position block copies the first observation when
/// one exists, higher orders start at zero; parameters sit at their prior;
/// log-precisions come from the lognormal location rule
/// `eta = ln E - sigma^2 / 2` with `E_pi_y = ratio_c * e_pi_x`.
pub fn init_belief(
    model: &ModelSpec,
    cfg: &OdemConfig,
    prior: &ParamPrior,
    y0: Option<&DVector<f64>>,
) -> BeliefState {
    let d = DIM;
    let mut mu_x = GenVec::zeros(cfg.k_x, d);
    if let Some(y) = y0 {
        mu_x.set_block(0, y);
    }

    let var_x = cfg.sigma_lambda_x * cfg.sigma_lambda_x;
    let var_y = cfg.sigma_lambda_y * cfg.sigma_lambda_y;
    let eta_x = cfg.e_pi_x.ln() - var_x / 2.0;
    let eta_y = (cfg.ratio_c * cfg.e_pi_x).ln() - var_y / 2.0;
    let mu_lambda = DVector::from_fn(2 * d, |i, _| if i < d { eta_x } else { eta_y });
    let lambda_vars = DVector::from_fn(2 * d, |i, _| if i < d { var_x } else { var_y });

    let p = prior.dim();
    assert_eq!(p, model.param_dim(), "prior dimension mismatch");
    BeliefState {
        mu_x,
        sigma_x: nalgebra::DMatrix::identity(cfg.k_x * d, cfg.k_x * d),
        mu_theta: prior.mean_vector(),
        sigma_theta: prior.covariance_matrix(),
        eta_theta: prior.mean_vector(),
        pi_theta: prior.precision_matrix(),
        mu_lambda: mu_lambda.clone(),
        sigma_lambda: nalgebra::DMatrix::from_diagonal(&lambda_vars),
        eta_lambda: mu_lambda,
        pi_lambda: nalgebra::DMatrix::from_diagonal(&lambda_vars.map(|v| 1.0 / v)),
    }
}

/// A single step failed.
#[derive(Debug)]
pub enum StepError {
    /// The Ozaki increment left the finite range.
    NonFiniteIncrement { spectral_radius: f64 },
    /// A curvature block stayed indefinite through the jitter ladder.
    Curvature {
        block: &'static str,
        source: crate::CholeskyError,
    },
    /// The objective could not be evaluated.
    Objective(VfeError),
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepError::NonFiniteIncrement { spectral_radius } => write!(
                f,
                "non-finite state increment (spectral radius of J0 ~ {spectral_radius:.3e})"
            ),
            StepError::Curvature { block, source } => {
                write!(f, "{block} curvature: {source}")
            }
            StepError::Objective(e) => write!(f, "objective: {e}"),
        }
    }
}

impl std::error::Error for StepError {}

/// Why a run stopped early.
#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Step {
        step: usize,
        cause: StepError,
        /// Everything recorded before the failing step, so callers can
        /// persist the partial trajectory.
        partial: Box<RunRecord>,
    },
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "{e}"),
            RunError::Step { step, cause, .. } => write!(f, "step {step}: {cause}"),
        }
    }
}

impl std::error::Error for RunError {}

/// One Ozaki state update.
#[derive(Debug, Clone)]
pub struct DStepOutcome {
    pub mu_x: GenVec,
    pub increment: DVector<f64>,
    /// The realised pseudo-time step exp(nu) / max(1, curvature radius).
    pub step_size: f64,
    /// Spectral-radius estimate of the state curvature block.
    pub curvature_radius: f64,
}

/// Move the state belief along `v = D mu - kappa g_x` through the local
/// linearisation `J0 = D - kappa H`, using the phi_1 matrix function so
/// singular `J0` (it contains the nilpotent shift) needs no inverse.
/// `H` is the local-linearity state curvature, matching the generalised
/// drift's own linearisation.
pub fn d_step(
    belief: &BeliefState,
    y_gen: &GenVec,
    cfg: &OdemConfig,
    gm: &GenModel,
) -> Result<DStepOutcome, StepError> {
    let grads = vfe_state_gradient(belief, y_gen, gm);
    let h = vfe::state_curvature(belief, gm);
    let curvature_radius = spectral_radius_estimate(&h, POWER_ITERS);
    let step_size = cfg.nu.exp() / curvature_radius.max(1.0);

    let d_op = gcm::shift_operator(gm.k_x, gm.d());
    let v = &d_op * &belief.mu_x.data - cfg.kappa * &grads;
    let j0 = d_op - cfg.kappa * &h;
    let phi = matexp::phi1(&(&j0 * step_size));
    let increment = step_size * (&phi * &v);

    if !increment.iter().all(|x| x.is_finite()) {
        return Err(StepError::NonFiniteIncrement {
            spectral_radius: spectral_radius_estimate(&j0, POWER_ITERS),
        });
    }
    Ok(DStepOutcome {
        mu_x: GenVec::from_flat(gm.k_x, gm.d(), &belief.mu_x.data + &increment),
        increment,
        step_size,
        curvature_radius,
    })
}

fn vfe_state_gradient(belief: &BeliefState, y_gen: &GenVec, gm: &GenModel) -> DVector<f64> {
    vfe::vfe_gradients(belief, y_gen, gm).g_x
}

/// One E/M event: M-step on the log-precisions, then E-step on the
/// parameters, each followed by a covariance refresh from the matching
/// curvature block and a prior hand-off; accumulators end reset.
pub fn em_step(
    belief: &mut BeliefState,
    acc_theta: &mut DVector<f64>,
    acc_lambda: &mut DVector<f64>,
    j: usize,
    cfg: &OdemConfig,
    y_gen: &GenVec,
    gm: &GenModel,
) -> Result<(), StepError> {
    belief.mu_lambda -= cfg.rm_lambda.rate(j) * &*acc_lambda;
    let h_ll = vfe::hessian_lambda(belief, y_gen, gm);
    let (sigma, pi) = covariance_from_curvature(&h_ll).map_err(|source| StepError::Curvature {
        block: "lambda",
        source,
    })?;
    belief.sigma_lambda = sigma;
    belief.eta_lambda = belief.mu_lambda.clone();
    belief.pi_lambda = pi;

    belief.mu_theta -= cfg.rm_theta.rate(j) * &*acc_theta;
    let h_tt = vfe::hessian_theta(belief, y_gen, gm);
    let (sigma, pi) = covariance_from_curvature(&h_tt).map_err(|source| StepError::Curvature {
        block: "theta",
        source,
    })?;
    belief.sigma_theta = sigma;
    belief.eta_theta = belief.mu_theta.clone();
    belief.pi_theta = pi;

    acc_theta.fill(0.0);
    acc_lambda.fill(0.0);
    Ok(())
}

/// Per-observation record row.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub t: usize,
    pub mu_x: Vec<f64>,
    pub sigma_x_diag: Vec<f64>,
    pub f_l: f64,
    /// Cumulative free action and its cumulative split.
    pub fa: f64,
    pub accuracy: f64,
    pub complexity: f64,
}

/// Per-E/M-event record row; j = 0 holds the initial priors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmRow {
    pub j: usize,
    pub mu_theta: Vec<f64>,
    pub sigma_theta_diag: Vec<f64>,
    pub mu_lambda: Vec<f64>,
    pub sigma_lambda_diag: Vec<f64>,
}

/// Everything a run leaves behind.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config: OdemConfig,
    pub model: ModelSpec,
    pub prior: ParamPrior,
    pub dataset: DatasetMeta,
    pub steps: Vec<StepRow>,
    pub em_events: Vec<EmRow>,
    /// Kept in memory only; the saved file stays byte-identical across
    /// reruns of the same configuration.
    pub wall_time_secs: f64,
}

impl RunRecord {
    pub fn final_fa(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.fa)
    }

    pub fn final_accuracy(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.accuracy)
    }

    pub fn final_complexity(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.complexity)
    }
}

/// Hooks into a running loop; all methods default to no-ops.
pub trait RunObserver {
    fn after_step(&mut self, _t: usize, _belief: &BeliefState, _value: &VfeValue) {}
    fn after_em(&mut self, _j: usize, _belief: &BeliefState) {}
    fn finished(&mut self, _belief: &BeliefState) {}
}

/// Observer that does nothing.
pub struct NoopObserver;

impl RunObserver for NoopObserver {}

fn em_row(j: usize, belief: &BeliefState) -> EmRow {
    EmRow {
        j,
        mu_theta: belief.mu_theta.as_slice().to_vec(),
        sigma_theta_diag: belief.sigma_theta.diagonal().as_slice().to_vec(),
        mu_lambda: belief.mu_lambda.as_slice().to_vec(),
        sigma_lambda_diag: belief.sigma_lambda.diagonal().as_slice().to_vec(),
    }
}

/// Run the loop over a dataset.
pub fn run_odem(
    ds: &Dataset,
    cfg: &OdemConfig,
    model: &ModelSpec,
    prior: &ParamPrior,
) -> Result<RunRecord, RunError> {
    run_odem_observed(ds, cfg, model, prior, &mut NoopObserver)
}

/// Run the loop over a dataset with observation hooks.
pub fn run_odem_observed(
    ds: &Dataset,
    cfg: &OdemConfig,
    model: &ModelSpec,
    prior: &ParamPrior,
    observer: &mut dyn RunObserver,
) -> Result<RunRecord, RunError> {
    run_odem_streamed(
        (0..ds.len()).map(|t| ds.observation(t)),
        &ds.meta,
        cfg,
        model,
        prior,
        observer,
    )
}

/// Run the loop over any in-order observation stream. The stream is pulled
/// exactly once per step, which is what makes the single-visit contract
/// checkable from outside with a counting iterator.
pub fn run_odem_streamed<I>(
    observations: I,
    meta: &DatasetMeta,
    cfg: &OdemConfig,
    model: &ModelSpec,
    prior: &ParamPrior,
    observer: &mut dyn RunObserver,
) -> Result<RunRecord, RunError>
where
    I: IntoIterator<Item = DVector<f64>>,
{
    cfg.validate().map_err(RunError::Config)?;
    let gm =
        GenModel::new(model.clone(), cfg.k_x, cfg.smooth_sigma, cfg.convention).map_err(|e| {
            RunError::Config(ConfigError {
                field: "smooth_sigma",
                message: format!("smoothness weights are not invertible: {e}"),
            })
        })?;

    let started = Instant::now();
    let mut belief = init_belief(model, cfg, prior, None);
    let mut buffer = ObsBuffer::new(gm.k_y() - 1);
    let mut acc_theta = DVector::zeros(model.param_dim());
    let mut acc_lambda = DVector::zeros(2 * gm.d());
    let mut steps: Vec<StepRow> = Vec::new();
    let mut em_events = vec![em_row(0, &belief)];
    let (mut fa, mut acc_cum, mut comp_cum) = (0.0, 0.0, 0.0);

    let assemble = |steps: &[StepRow], em_events: &[EmRow], wall: f64| RunRecord {
        config: cfg.clone(),
        model: model.clone(),
        prior: prior.clone(),
        dataset: meta.clone(),
        steps: steps.to_vec(),
        em_events: em_events.to_vec(),
        wall_time_secs: wall,
    };
    macro_rules! step_try {
        ($t:expr, $res:expr) => {
            match $res {
                Ok(v) => v,
                Err(cause) => {
                    return Err(RunError::Step {
                        step: $t,
                        cause,
                        partial: Box::new(assemble(
                            &steps,
                            &em_events,
                            started.elapsed().as_secs_f64(),
                        )),
                    })
                }
            }
        };
    }

    for (t, y) in observations.into_iter().enumerate() {
        if t == 0 {
            belief.mu_x.set_block(0, &y);
        }
        buffer.push(y);
        let y_gen = buffer.generalised(meta.dt);

        let outcome = step_try!(t, d_step(&belief, &y_gen, cfg, &gm));
        belief.mu_x = outcome.mu_x;

        let grads = vfe::vfe_gradients(&belief, &y_gen, &gm);
        acc_lambda = accumulate(&acc_lambda, &grads.g_lambda, cfg.beta_lambda);
        acc_theta = accumulate(&acc_theta, &grads.g_theta, cfg.beta_theta);

        if t > 0 && t % cfg.inter_em == 0 {
            let j = (t + 1) / cfg.inter_em;
            step_try!(
                t,
                em_step(
                    &mut belief,
                    &mut acc_theta,
                    &mut acc_lambda,
                    j,
                    cfg,
                    &y_gen,
                    &gm
                )
            );
            em_events.push(em_row(j, &belief));
            observer.after_em(j, &belief);
        }

        let h_xx = vfe::state_curvature(&belief, &gm);
        belief.sigma_x = step_try!(
            t,
            spd_inverse(&h_xx).map_err(|source| StepError::Curvature {
                block: "state",
                source,
            })
        );

        let value = step_try!(
            t,
            vfe::evaluate(&belief, &y_gen, &gm).map_err(StepError::Objective)
        );
        fa += value.total;
        acc_cum += value.accuracy;
        comp_cum += value.complexity;
        steps.push(StepRow {
            t,
            mu_x: belief.mu_x.data.as_slice().to_vec(),
            sigma_x_diag: belief.sigma_x.diagonal().as_slice().to_vec(),
            f_l: value.total,
            fa,
            accuracy: acc_cum,
            complexity: comp_cum,
        });
        observer.after_step(t, &belief, &value);
    }

    observer.finished(&belief);
    Ok(RunRecord {
        config: cfg.clone(),
        model: model.clone(),
        prior: prior.clone(),
        dataset: meta.clone(),
        steps,
        em_events,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}

/// Loading or validating a run-record file failed.
#[derive(Debug)]
pub enum RecordIoError {
    Io(std::io::Error),
    Parse { line: usize, message: String },
}

impl fmt::Display for RecordIoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordIoError::Io(e) => write!(f, "record io: {e}"),
            RecordIoError::Parse { line, message } => write!(f, "record line {line}: {message}"),
        }
    }
}

impl std::error::Error for RecordIoError {}

impl From<std::io::Error> for RecordIoError {
    fn from(e: std::io::Error) -> Self {
        RecordIoError::Io(e)
    }
}

impl RunRecord {
    /// Render to the text form. Floats use the shortest representation
    /// that parses back to identical bits; wall time is deliberately not
    /// written.
    pub fn to_text(&self) -> String {
        let kd = self.config.k_x * DIM;
        let p = self.model.param_dim();
        let mut out = String::new();
        out.push_str(RECORD_MAGIC);
        out.push('\n');
        out.push_str("# config ");
        out.push_str(&serde_json::to_string(&self.config).expect("config serialises"));
        out.push('\n');
        out.push_str("# model ");
        out.push_str(&serde_json::to_string(&self.model).expect("model serialises"));
        out.push('\n');
        out.push_str("# prior ");
        out.push_str(&serde_json::to_string(&self.prior).expect("prior serialises"));
        out.push('\n');
        out.push_str("# dataset ");
        out.push_str(&serde_json::to_string(&self.dataset).expect("meta serialises"));
        out.push('\n');
        let _ = writeln!(
            out,
            "# columns S: t mu_x[{kd}] sigma_x_diag[{kd}] f_l fa accuracy complexity"
        );
        let _ = writeln!(
            out,
            "# columns E: j mu_theta[{p}] sigma_theta_diag[{p}] mu_lambda[6] sigma_lambda_diag[6]"
        );
        for s in &self.steps {
            let _ = write!(out, "S {}", s.t);
            for v in s.mu_x.iter().chain(&s.sigma_x_diag) {
                let _ = write!(out, " {v}");
            }
            let _ = writeln!(out, " {} {} {} {}", s.f_l, s.fa, s.accuracy, s.complexity);
        }
        for e in &self.em_events {
            let _ = write!(out, "E {}", e.j);
            for v in e
                .mu_theta
                .iter()
                .chain(&e.sigma_theta_diag)
                .chain(&e.mu_lambda)
                .chain(&e.sigma_lambda_diag)
            {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    /// Parse the text form back; wall time is not stored and loads as zero.
    pub fn from_text(text: &str) -> Result<RunRecord, RecordIoError> {
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines.next().ok_or(RecordIoError::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        if magic != RECORD_MAGIC {
            return Err(RecordIoError::Parse {
                line: 1,
                message: format!("expected {RECORD_MAGIC:?}, found {magic:?}"),
            });
        }

        let mut config: Option<OdemConfig> = None;
        let mut model: Option<ModelSpec> = None;
        let mut prior: Option<ParamPrior> = None;
        let mut dataset: Option<DatasetMeta> = None;
        let mut steps = Vec::new();
        let mut em_events = Vec::new();

        for (idx, raw) in lines {
            let line_no = idx + 1;
            let parse_err = |message: String| RecordIoError::Parse {
                line: line_no,
                message,
            };
            if let Some(body) = raw.strip_prefix("# config ") {
                config = Some(serde_json::from_str(body).map_err(|e| parse_err(format!("{e}")))?);
                continue;
            }
            if let Some(body) = raw.strip_prefix("# model ") {
                model = Some(serde_json::from_str(body).map_err(|e| parse_err(format!("{e}")))?);
                continue;
            }
            if let Some(body) = raw.strip_prefix("# prior ") {
                prior = Some(serde_json::from_str(body).map_err(|e| parse_err(format!("{e}")))?);
                continue;
            }
            if let Some(body) = raw.strip_prefix("# dataset ") {
                dataset = Some(serde_json::from_str(body).map_err(|e| parse_err(format!("{e}")))?);
                continue;
            }
            if raw.starts_with('#') || raw.trim().is_empty() {
                continue;
            }

            let (cfg, mdl) = match (&config, &model) {
                (Some(c), Some(m)) => (c, m),
                _ => return Err(parse_err("data row before header".into())),
            };
            let kd = cfg.k_x * DIM;
            let p = mdl.param_dim();
            let fields: Vec<&str> = raw.split_whitespace().collect();
            let nums = |range: std::ops::Range<usize>| -> Result<Vec<f64>, RecordIoError> {
                fields[range]
                    .iter()
                    .map(|s| {
                        s.parse().map_err(|_| RecordIoError::Parse {
                            line: line_no,
                            message: format!("not a number: {s:?}"),
                        })
                    })
                    .collect()
            };
            match fields.first() {
                Some(&"S") => {
                    if fields.len() != 2 + 2 * kd + 4 {
                        return Err(parse_err(format!(
                            "S row needs {} fields, found {}",
                            2 + 2 * kd + 4,
                            fields.len()
                        )));
                    }
                    let t: usize = fields[1]
                        .parse()
                        .map_err(|_| parse_err(format!("bad step index {:?}", fields[1])))?;
                    let tail = nums(2 + 2 * kd..fields.len())?;
                    steps.push(StepRow {
                        t,
                        mu_x: nums(2..2 + kd)?,
                        sigma_x_diag: nums(2 + kd..2 + 2 * kd)?,
                        f_l: tail[0],
                        fa: tail[1],
                        accuracy: tail[2],
                        complexity: tail[3],
                    });
                }
                Some(&"E") => {
                    if fields.len() != 2 + 2 * p + 12 {
                        return Err(parse_err(format!(
                            "E row needs {} fields, found {}",
                            2 + 2 * p + 12,
                            fields.len()
                        )));
                    }
                    let j: usize = fields[1]
                        .parse()
                        .map_err(|_| parse_err(format!("bad event index {:?}", fields[1])))?;
                    em_events.push(EmRow {
                        j,
                        mu_theta: nums(2..2 + p)?,
                        sigma_theta_diag: nums(2 + p..2 + 2 * p)?,
                        mu_lambda: nums(2 + 2 * p..2 + 2 * p + 6)?,
                        sigma_lambda_diag: nums(2 + 2 * p + 6..2 + 2 * p + 12)?,
                    });
                }
                _ => return Err(parse_err(format!("unrecognised row {raw:?}"))),
            }
        }

        let missing = |what: &str| RecordIoError::Parse {
            line: 1,
            message: format!("missing {what} header"),
        };
        Ok(RunRecord {
            config: config.ok_or_else(|| missing("config"))?,
            model: model.ok_or_else(|| missing("model"))?,
            prior: prior.ok_or_else(|| missing("prior"))?,
            dataset: dataset.ok_or_else(|| missing("dataset"))?,
            steps,
            em_events,
            wall_time_secs: 0.0,
        })
    }
}

pub fn save_run_record(record: &RunRecord, path: &Path) -> Result<(), RecordIoError> {
    fs::write(path, record.to_text())?;
    Ok(())
}

pub fn load_run_record(path: &Path) -> Result<RunRecord, RecordIoError> {
    RunRecord::from_text(&fs::read_to_string(path)?)
}
