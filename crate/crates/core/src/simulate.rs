//! Synthetic ground-truth generation.
//!
//! Trajectories follow the Euler scheme `x_{t+1} = x_t + dt (f(x_t) + w_t)`
//! where `w_t` is temporally smooth noise: iid Gaussian draws convolved
//! with a unit-sum Gaussian kernel. Observations add an independent smooth
//! noise stream on top of the states. Everything is seeded and bit-exactly
//! reproducible, including the text round-trip of saved datasets.

use crate::dynamics::{ModelSpec, DIM};
use nalgebra::{DVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fs;
use std::path::Path;

/// File-format tag checked on load.
const DATASET_MAGIC: &str = "# odem-dataset v1";

/// Initial condition shared by both example systems.
pub const DEFAULT_X0: [f64; 3] = [1.0, 1.5, 0.8];

/// One smooth-noise stream: white standard deviation, convolution kernel
/// geometry, and the seed of its dedicated generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub white_std: f64,
    /// Number of kernel taps; must be odd so the kernel is centred.
    pub kernel_size: usize,
    /// Squared width of the Gaussian kernel in time units; the kernel tap
    /// at offset m is proportional to exp(-(m dt)^2 / (2 kernel_var)).
    pub kernel_var: f64,
    pub seed: u64,
}

impl NoiseSpec {
    /// Process-noise defaults.
    pub fn state_default(seed: u64) -> Self {
        NoiseSpec {
            white_std: 0.05,
            kernel_size: 51,
            kernel_var: 0.005,
            seed,
        }
    }

    /// Observation-noise defaults.
    pub fn obs_default(seed: u64) -> Self {
        NoiseSpec {
            white_std: 0.1,
            kernel_size: 51,
            kernel_var: 0.005,
            seed,
        }
    }

    /// A stream that contributes nothing (useful for noise-free runs).
    pub fn silent(seed: u64) -> Self {
        NoiseSpec {
            white_std: 0.0,
            kernel_size: 1,
            kernel_var: 0.005,
            seed,
        }
    }
}

/// Generation failed before producing a dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum SimError {
    InvalidSpec {
        field: &'static str,
        message: String,
    },
    /// The Euler trajectory left the finite range at this step.
    Diverged { step: usize },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::InvalidSpec { field, message } => {
                write!(f, "invalid {field}: {message}")
            }
            SimError::Diverged { step } => {
                write!(f, "trajectory diverged to non-finite values at step {step}")
            }
        }
    }
}

impl std::error::Error for SimError {}

/// Unit-sum Gaussian kernel over `size` taps spaced `dt` apart.
fn gaussian_kernel(size: usize, dt: f64, kernel_var: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|m| {
            let tau = m as f64 * dt;
            (-tau * tau / (2.0 * kernel_var)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Half-sample symmetric index reflection into `0..n`.
fn reflect(idx: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if idx < 0 {
        -idx - 1
    } else if idx >= n {
        2 * n - idx - 1
    } else {
        idx
    };
    r as usize
}

fn validate_noise(spec: &NoiseSpec, n: usize) -> Result<(), SimError> {
    if spec.white_std < 0.0 || !spec.white_std.is_finite() {
        return Err(SimError::InvalidSpec {
            field: "white_std",
            message: format!("must be finite and non-negative, got {}", spec.white_std),
        });
    }
    if spec.kernel_size == 0 || spec.kernel_size % 2 == 0 {
        return Err(SimError::InvalidSpec {
            field: "kernel_size",
            message: format!("must be odd and positive, got {}", spec.kernel_size),
        });
    }
    if n > 0 && spec.kernel_size > n {
        return Err(SimError::InvalidSpec {
            field: "kernel_size",
            message: format!(
                "kernel of {} taps exceeds series length {n}",
                spec.kernel_size
            ),
        });
    }
    if !(spec.kernel_var > 0.0) {
        return Err(SimError::InvalidSpec {
            field: "kernel_var",
            message: format!("must be positive, got {}", spec.kernel_var),
        });
    }
    Ok(())
}

/// `n` samples of `d`-channel smooth noise. All channels come from one
/// generator, drawn channel by channel, so the stream is a pure function
/// of the seed.
pub fn smooth_noise(
    n: usize,
    d: usize,
    dt: f64,
    spec: &NoiseSpec,
) -> Result<Vec<DVector<f64>>, SimError> {
    validate_noise(spec, n)?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.white_std).expect("validated std");
    let kernel = gaussian_kernel(spec.kernel_size, dt, spec.kernel_var);
    let half = (spec.kernel_size / 2) as isize;

    let mut channels: Vec<Vec<f64>> = Vec::with_capacity(d);
    for _ in 0..d {
        let white: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let smoothed: Vec<f64> = (0..n as isize)
            .map(|i| {
                kernel
                    .iter()
                    .enumerate()
                    .map(|(m, w)| w * white[reflect(i + m as isize - half, n)])
                    .sum()
            })
            .collect();
        channels.push(smoothed);
    }

    Ok((0..n)
        .map(|t| DVector::from_fn(d, |c, _| channels[c][t]))
        .collect())
}

/// Euler integration of the drift plus additive process noise. The state
/// at index t uses noise sample t-1, so `noise` needs `n` entries (the
/// final one is unused, which keeps noise indexing aligned with time).
pub fn integrate_gp(
    model: &ModelSpec,
    theta: &[f64],
    x0: &Vector3<f64>,
    n: usize,
    dt: f64,
    noise: &[DVector<f64>],
) -> Result<Vec<Vector3<f64>>, SimError> {
    assert!(noise.len() >= n.saturating_sub(1), "noise stream too short");
    let mut states = Vec::with_capacity(n);
    if n == 0 {
        return Ok(states);
    }
    states.push(*x0);
    for t in 0..n - 1 {
        let x = states[t];
        let w = Vector3::new(noise[t][0], noise[t][1], noise[t][2]);
        let next = x + dt * (model.drift(&x, theta) + w);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(SimError::Diverged { step: t + 1 });
        }
        states.push(next);
    }
    Ok(states)
}

/// Identity observation map plus additive noise.
pub fn observe(states: &[Vector3<f64>], noise: &[DVector<f64>]) -> Vec<Vector3<f64>> {
    assert!(noise.len() >= states.len(), "noise stream too short");
    states
        .iter()
        .zip(noise)
        .map(|(x, v)| x + Vector3::new(v[0], v[1], v[2]))
        .collect()
}

/// Everything needed to regenerate a dataset, echoed into every file that
/// derives from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema: u32,
    pub model: ModelSpec,
    pub theta: Vec<f64>,
    pub x0: [f64; 3],
    pub t_total: f64,
    pub dt: f64,
    pub n: usize,
    pub state_noise: NoiseSpec,
    pub obs_noise: NoiseSpec,
}

/// True states and noisy observations with full provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub states: Vec<Vector3<f64>>,
    pub observations: Vec<Vector3<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn observation(&self, t: usize) -> DVector<f64> {
        DVector::from_column_slice(self.observations[t].as_slice())
    }
}

/// Generate a dataset: `round(t_total / dt)` points including the initial
/// condition, with independent smooth noise streams on states and
/// observations.
pub fn generate(
    model: &ModelSpec,
    theta: &[f64],
    x0: [f64; 3],
    t_total: f64,
    dt: f64,
    state_noise: NoiseSpec,
    obs_noise: NoiseSpec,
) -> Result<Dataset, SimError> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(SimError::InvalidSpec {
            field: "dt",
            message: format!("must be positive and finite, got {dt}"),
        });
    }
    if !(t_total > 0.0) || !t_total.is_finite() {
        return Err(SimError::InvalidSpec {
            field: "t_total",
            message: format!("must be positive and finite, got {t_total}"),
        });
    }
    if theta.len() != model.param_dim() {
        return Err(SimError::InvalidSpec {
            field: "theta",
            message: format!(
                "{} expects {} parameters, got {}",
                model.family_name(),
                model.param_dim(),
                theta.len()
            ),
        });
    }
    let n = (t_total / dt).round() as usize;
    if n == 0 {
        return Err(SimError::InvalidSpec {
            field: "t_total",
            message: format!("t_total {t_total} rounds to zero steps at dt {dt}"),
        });
    }

    let w = smooth_noise(n, DIM, dt, &state_noise)?;
    let v = smooth_noise(n, DIM, dt, &obs_noise)?;
    let states = integrate_gp(model, theta, &Vector3::from(x0), n, dt, &w)?;
    let observations = observe(&states, &v);

    Ok(Dataset {
        meta: DatasetMeta {
            schema: 1,
            model: model.clone(),
            theta: theta.to_vec(),
            x0,
            t_total,
            dt,
            n,
            state_noise,
            obs_noise,
        },
        states,
        observations,
    })
}

/// Loading or validating a dataset file failed.
#[derive(Debug)]
pub enum DatasetIoError {
    Io(std::io::Error),
    Parse { line: usize, message: String },
}

impl fmt::Display for DatasetIoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetIoError::Io(e) => write!(f, "dataset io: {e}"),
            DatasetIoError::Parse { line, message } => {
                write!(f, "dataset line {line}: {message}")
            }
        }
    }
}

impl std::error::Error for DatasetIoError {}

impl From<std::io::Error> for DatasetIoError {
    fn from(e: std::io::Error) -> Self {
        DatasetIoError::Io(e)
    }
}

/// Render a dataset to its text form. Values use the shortest
/// representation that parses back to the same bits.
pub fn dataset_to_text(ds: &Dataset) -> String {
    let mut out = String::new();
    out.push_str(DATASET_MAGIC);
    out.push('\n');
    out.push_str("# meta ");
    out.push_str(&serde_json::to_string(&ds.meta).expect("meta serialises"));
    out.push('\n');
    out.push_str("# columns t x1 x2 x3 y1 y2 y3\n");
    for t in 0..ds.len() {
        let x = ds.states[t];
        let y = ds.observations[t];
        out.push_str(&format!(
            "{t} {} {} {} {} {} {}\n",
            x[0], x[1], x[2], y[0], y[1], y[2]
        ));
    }
    out
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetIoError> {
    fs::write(path, dataset_to_text(ds))?;
    Ok(())
}

/// Parse the text form back; checks the magic line, provenance header, row
/// arity, row indices, and the row count against the header.
pub fn dataset_from_text(text: &str) -> Result<Dataset, DatasetIoError> {
    let mut lines = text.lines().enumerate();
    let (_, magic) = lines.next().ok_or(DatasetIoError::Parse {
        line: 1,
        message: "empty file".into(),
    })?;
    if magic != DATASET_MAGIC {
        return Err(DatasetIoError::Parse {
            line: 1,
            message: format!("expected {DATASET_MAGIC:?}, found {magic:?}"),
        });
    }

    let mut meta: Option<DatasetMeta> = None;
    let mut states = Vec::new();
    let mut observations = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        if let Some(body) = raw.strip_prefix("# meta ") {
            meta = Some(
                serde_json::from_str(body).map_err(|e| DatasetIoError::Parse {
                    line: line_no,
                    message: format!("bad meta json: {e}"),
                })?,
            );
            continue;
        }
        if raw.starts_with('#') || raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(DatasetIoError::Parse {
                line: line_no,
                message: format!("expected 7 columns, found {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64, DatasetIoError> {
            s.parse().map_err(|_| DatasetIoError::Parse {
                line: line_no,
                message: format!("not a number: {s:?}"),
            })
        };
        let t: usize = fields[0].parse().map_err(|_| DatasetIoError::Parse {
            line: line_no,
            message: format!("bad row index: {:?}", fields[0]),
        })?;
        if t != states.len() {
            return Err(DatasetIoError::Parse {
                line: line_no,
                message: format!("row index {t} out of order, expected {}", states.len()),
            });
        }
        states.push(Vector3::new(
            parse(fields[1])?,
            parse(fields[2])?,
            parse(fields[3])?,
        ));
        observations.push(Vector3::new(
            parse(fields[4])?,
            parse(fields[5])?,
            parse(fields[6])?,
        ));
    }

    let meta = meta.ok_or(DatasetIoError::Parse {
        line: 1,
        message: "missing provenance header (# meta line)".into(),
    })?;
    if meta.n != states.len() {
        return Err(DatasetIoError::Parse {
            line: 1,
            message: format!("header says n={}, file has {} rows", meta.n, states.len()),
        });
    }
    Ok(Dataset {
        meta,
        states,
        observations,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetIoError> {
    dataset_from_text(&fs::read_to_string(path)?)
}
