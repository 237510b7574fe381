//! Sweep execution, model selection, and report emission.
//!
//! A sweep crosses the tuning axes into a config list, runs each config
//! independently (failures become rows, not crashes), and records final
//! free action, its split, and state MSE per config. Selection minimises
//! free action strictly within one (k_x, C) stratum; the API takes both so
//! cross-order comparisons cannot be expressed. Reports are plot-ready
//! columnar text.

use crate::dynamics::{ModelSpec, ParamPrior};
use crate::odem::{self, OdemConfig, RunError, RunRecord};
use crate::simulate::{Dataset, DatasetMeta};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// File-format tag checked on load.
const SWEEP_MAGIC: &str = "# odem-sweep v1";

/// Fraction of the dataset discarded by the burned MSE variant.
pub const BURN_IN_FRACTION: f64 = 0.1;

/// Cross-product tuning axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub k_x: Vec<usize>,
    pub kappa: Vec<f64>,
    pub inter_em: Vec<usize>,
    pub beta_lambda: Vec<f64>,
    pub beta_theta: Vec<f64>,
    pub ratio_c: Vec<f64>,
    pub sigma_lambda_x: Vec<f64>,
    pub sigma_lambda_y: Vec<f64>,
    /// Move both smoothing factors together over the beta_lambda axis
    /// instead of crossing them.
    pub couple_betas: bool,
}

impl SweepGrid {
    /// The full published grid: 2*3*4*3*3*7 = 1512 combinations.
    pub fn full() -> Self {
        SweepGrid {
            k_x: vec![2, 3],
            kappa: vec![1.0, 0.5, 0.25],
            inter_em: vec![64, 128, 256, 512],
            beta_lambda: vec![0.0, 0.1, 0.2],
            beta_theta: vec![0.0, 0.1, 0.2],
            ratio_c: vec![1.0 / 50.0, 1.0 / 25.0, 1.0 / 10.0, 1.0, 10.0, 25.0, 50.0],
            sigma_lambda_x: vec![0.1],
            sigma_lambda_y: vec![0.1],
            couple_betas: false,
        }
    }

    /// Desk-scale 24-config subset for routine testing.
    pub fn ci() -> Self {
        SweepGrid {
            k_x: vec![2, 3],
            kappa: vec![0.5],
            inter_em: vec![128, 512],
            beta_lambda: vec![0.0, 0.1],
            beta_theta: vec![0.0, 0.1],
            ratio_c: vec![0.1, 1.0, 10.0],
            sigma_lambda_x: vec![0.1],
            sigma_lambda_y: vec![0.1],
            couple_betas: true,
        }
    }

    /// Expand into full configs over `base`, nesting axes in tuple order
    /// so emission order equals lexicographic tuple order for sorted axes.
    pub fn configs(&self, base: &OdemConfig) -> Vec<OdemConfig> {
        let mut out = Vec::new();
        let betas: Vec<(f64, f64)> = if self.couple_betas {
            self.beta_lambda.iter().map(|&b| (b, b)).collect()
        } else {
            self.beta_lambda
                .iter()
                .flat_map(|&bl| self.beta_theta.iter().map(move |&bt| (bl, bt)))
                .collect()
        };
        for &k_x in &self.k_x {
            for &kappa in &self.kappa {
                for &inter_em in &self.inter_em {
                    for &(beta_lambda, beta_theta) in &betas {
                        for &ratio_c in &self.ratio_c {
                            for &sigma_lambda_x in &self.sigma_lambda_x {
                                for &sigma_lambda_y in &self.sigma_lambda_y {
                                    out.push(OdemConfig {
                                        k_x,
                                        k_y: k_x - 1,
                                        kappa,
                                        inter_em,
                                        beta_lambda,
                                        beta_theta,
                                        ratio_c,
                                        sigma_lambda_x,
                                        sigma_lambda_y,
                                        ..base.clone()
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Outcome of one sweep entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Ok,
    Failed(String),
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }
}

/// One sweep row: the config tuple plus its outcome metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub config: OdemConfig,
    pub status: RunStatus,
    pub fa: f64,
    pub accuracy: f64,
    pub complexity: f64,
    pub mse: f64,
    pub mse_burned: f64,
    /// File name of the persisted record, relative to the table location.
    pub record_file: Option<String>,
}

/// A sweep's full result with the context needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub base: OdemConfig,
    pub model: ModelSpec,
    pub prior: ParamPrior,
    pub dataset: DatasetMeta,
    pub rows: Vec<SweepRow>,
}

/// Sweep-level failure (worker pool or file output; individual run
/// failures become rows instead).
#[derive(Debug)]
pub enum SweepError {
    Pool(String),
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl fmt::Display for SweepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepError::Pool(m) => write!(f, "worker pool: {m}"),
            SweepError::Io { path, source } => write!(f, "writing {}: {source}", path.display()),
        }
    }
}

impl std::error::Error for SweepError {}

/// Mean squared error over all entries of two equal-length position
/// series.
pub fn mse(truth: &[Vector3<f64>], inferred: &[Vector3<f64>]) -> f64 {
    assert_eq!(truth.len(), inferred.len(), "mse needs equal lengths");
    if truth.is_empty() {
        return f64::NAN;
    }
    let total: f64 = truth
        .iter()
        .zip(inferred)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    total / (truth.len() * 3) as f64
}

fn record_pairs(
    record: &RunRecord,
    ds: &Dataset,
    from_t: usize,
) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    let mut truth = Vec::new();
    let mut inferred = Vec::new();
    for s in &record.steps {
        if s.t < from_t || s.t >= ds.states.len() {
            continue;
        }
        truth.push(ds.states[s.t]);
        inferred.push(Vector3::new(s.mu_x[0], s.mu_x[1], s.mu_x[2]));
    }
    (truth, inferred)
}

/// MSE of a record's position block against the dataset's true states.
pub fn mse_of_record(record: &RunRecord, ds: &Dataset) -> f64 {
    let (truth, inferred) = record_pairs(record, ds, 0);
    mse(&truth, &inferred)
}

/// Same, discarding the first `burn_fraction` of the dataset.
pub fn mse_of_record_burned(record: &RunRecord, ds: &Dataset, burn_fraction: f64) -> f64 {
    let from_t = (ds.len() as f64 * burn_fraction).floor() as usize;
    let (truth, inferred) = record_pairs(record, ds, from_t);
    mse(&truth, &inferred)
}

/// Run every grid config over the dataset. Rows come back in grid order
/// regardless of `workers` (0 = one per core). When `out_dir` is given,
/// each run's record (partial on failure) is persisted there.
pub fn run_sweep(
    ds: &Dataset,
    base: &OdemConfig,
    grid: &SweepGrid,
    model: &ModelSpec,
    prior: &ParamPrior,
    workers: usize,
    out_dir: Option<&Path>,
) -> Result<SweepTable, SweepError> {
    let configs = grid.configs(base);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SweepError::Pool(e.to_string()))?;

    let rows: Result<Vec<SweepRow>, SweepError> = pool.install(|| {
        configs
            .par_iter()
            .enumerate()
            .map(|(index, cfg)| run_one(index, cfg, ds, model, prior, out_dir))
            .collect()
    });
    let mut rows = rows?;
    rows.sort_by_key(|r| r.index);

    Ok(SweepTable {
        base: base.clone(),
        model: model.clone(),
        prior: prior.clone(),
        dataset: ds.meta.clone(),
        rows,
    })
}

fn run_one(
    index: usize,
    cfg: &OdemConfig,
    ds: &Dataset,
    model: &ModelSpec,
    prior: &ParamPrior,
    out_dir: Option<&Path>,
) -> Result<SweepRow, SweepError> {
    let (record, status) = match odem::run_odem(ds, cfg, model, prior) {
        Ok(record) => (Some(record), RunStatus::Ok),
        Err(RunError::Step {
            step,
            cause,
            partial,
        }) => (
            Some(*partial),
            RunStatus::Failed(format!("step {step}: {cause}")),
        ),
        Err(e @ RunError::Config(_)) => (None, RunStatus::Failed(e.to_string())),
    };

    let mut record_file = None;
    if let (Some(record), Some(dir)) = (&record, out_dir) {
        let name = format!("run_{index:04}.txt");
        let path = dir.join(&name);
        odem::save_run_record(record, &path).map_err(|e| SweepError::Io {
            path: path.clone(),
            source: match e {
                odem::RecordIoError::Io(io) => io,
                other => std::io::Error::new(std::io::ErrorKind::InvalidData, other.to_string()),
            },
        })?;
        record_file = Some(name);
    }

    let (fa, accuracy, complexity, m, mb) = match &record {
        Some(r) => (
            r.final_fa(),
            r.final_accuracy(),
            r.final_complexity(),
            mse_of_record(r, ds),
            mse_of_record_burned(r, ds, BURN_IN_FRACTION),
        ),
        None => (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN),
    };

    Ok(SweepRow {
        index,
        config: cfg.clone(),
        status,
        fa,
        accuracy,
        complexity,
        mse: m,
        mse_burned: mb,
        record_file,
    })
}

/// No successful row matched the requested stratum.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectError {
    pub k_x: usize,
    pub ratio_c: f64,
}

impl fmt::Display for SelectError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "no successful sweep row with k_x = {} and C = {}",
            self.k_x, self.ratio_c
        )
    }
}

impl std::error::Error for SelectError {}

fn config_tuple(cfg: &OdemConfig) -> [f64; 8] {
    [
        cfg.k_x as f64,
        cfg.kappa,
        cfg.inter_em as f64,
        cfg.beta_lambda,
        cfg.beta_theta,
        cfg.ratio_c,
        cfg.sigma_lambda_x,
        cfg.sigma_lambda_y,
    ]
}

fn tuple_less(a: &[f64; 8], b: &[f64; 8]) -> bool {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

/// Lowest-FA successful row within one (k_x, C) stratum; free action is
/// never compared across different k_x. Ties go to the lexicographically
/// smallest config tuple, so the result is permutation-invariant.
pub fn select_best(rows: &[SweepRow], k_x: usize, ratio_c: f64) -> Result<&SweepRow, SelectError> {
    let mut best: Option<&SweepRow> = None;
    for row in rows {
        if !row.status.is_ok() || row.config.k_x != k_x || row.config.ratio_c != ratio_c {
            continue;
        }
        best = Some(match best {
            None => row,
            Some(cur) => match row.fa.total_cmp(&cur.fa) {
                std::cmp::Ordering::Less => row,
                std::cmp::Ordering::Greater => cur,
                std::cmp::Ordering::Equal => {
                    if tuple_less(&config_tuple(&row.config), &config_tuple(&cur.config)) {
                        row
                    } else {
                        cur
                    }
                }
            },
        });
    }
    best.ok_or(SelectError { k_x, ratio_c })
}

/// Distinct (k_x, C) strata present in the rows, sorted.
pub fn strata(rows: &[SweepRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = Vec::new();
    for row in rows {
        let key = (row.config.k_x, row.config.ratio_c);
        if !out.iter().any(|&(k, c)| k == key.0 && c == key.1) {
            out.push(key);
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    out
}

fn status_cell(status: &RunStatus) -> String {
    match status {
        RunStatus::Ok => "ok".to_string(),
        RunStatus::Failed(m) => format!("failed:{}", m.replace(['\t', '\n'], " ")),
    }
}

impl SweepTable {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(SWEEP_MAGIC);
        out.push('\n');
        out.push_str("# base ");
        out.push_str(&serde_json::to_string(&self.base).expect("config serialises"));
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
        out.push_str(
            "# columns: index k_x kappa inter_em beta_lambda beta_theta ratio_c \
             sigma_lambda_x sigma_lambda_y fa accuracy complexity mse mse_burned status record\n",
        );
        for r in &self.rows {
            let c = &r.config;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.index,
                c.k_x,
                c.kappa,
                c.inter_em,
                c.beta_lambda,
                c.beta_theta,
                c.ratio_c,
                c.sigma_lambda_x,
                c.sigma_lambda_y,
                r.fa,
                r.accuracy,
                r.complexity,
                r.mse,
                r.mse_burned,
                status_cell(&r.status),
                r.record_file.as_deref().unwrap_or("-"),
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<SweepTable, TableIoError> {
        let mut lines = text.lines().enumerate();
        let (_, magic) = lines.next().ok_or(TableIoError::Parse {
            line: 1,
            message: "empty file".into(),
        })?;
        if magic != SWEEP_MAGIC {
            return Err(TableIoError::Parse {
                line: 1,
                message: format!("expected {SWEEP_MAGIC:?}, found {magic:?}"),
            });
        }

        let mut base: Option<OdemConfig> = None;
        let mut model: Option<ModelSpec> = None;
        let mut prior: Option<ParamPrior> = None;
        let mut dataset: Option<DatasetMeta> = None;
        let mut rows = Vec::new();
        for (idx, raw) in lines {
            let line_no = idx + 1;
            let parse_err = |message: String| TableIoError::Parse {
                line: line_no,
                message,
            };
            if let Some(body) = raw.strip_prefix("# base ") {
                base = Some(serde_json::from_str(body).map_err(|e| parse_err(format!("{e}")))?);
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
            let base_cfg = base
                .as_ref()
                .ok_or_else(|| parse_err("data row before header".into()))?;
            let fields: Vec<&str> = raw.split('\t').collect();
            if fields.len() != 16 {
                return Err(parse_err(format!(
                    "expected 16 columns, found {}",
                    fields.len()
                )));
            }
            let int = |s: &str| -> Result<usize, TableIoError> {
                s.parse().map_err(|_| TableIoError::Parse {
                    line: line_no,
                    message: format!("not an integer: {s:?}"),
                })
            };
            let num = |s: &str| -> Result<f64, TableIoError> {
                s.parse().map_err(|_| TableIoError::Parse {
                    line: line_no,
                    message: format!("not a number: {s:?}"),
                })
            };
            let k_x = int(fields[1])?;
            let config = OdemConfig {
                k_x,
                k_y: k_x - 1,
                kappa: num(fields[2])?,
                inter_em: int(fields[3])?,
                beta_lambda: num(fields[4])?,
                beta_theta: num(fields[5])?,
                ratio_c: num(fields[6])?,
                sigma_lambda_x: num(fields[7])?,
                sigma_lambda_y: num(fields[8])?,
                ..base_cfg.clone()
            };
            let status = if fields[14] == "ok" {
                RunStatus::Ok
            } else if let Some(m) = fields[14].strip_prefix("failed:") {
                RunStatus::Failed(m.to_string())
            } else {
                return Err(parse_err(format!("bad status {:?}", fields[14])));
            };
            rows.push(SweepRow {
                index: int(fields[0])?,
                config,
                status,
                fa: num(fields[9])?,
                accuracy: num(fields[10])?,
                complexity: num(fields[11])?,
                mse: num(fields[12])?,
                mse_burned: num(fields[13])?,
                record_file: match fields[15] {
                    "-" => None,
                    name => Some(name.to_string()),
                },
            });
        }

        let missing = |what: &str| TableIoError::Parse {
            line: 1,
            message: format!("missing {what} header"),
        };
        Ok(SweepTable {
            base: base.ok_or_else(|| missing("base"))?,
            model: model.ok_or_else(|| missing("model"))?,
            prior: prior.ok_or_else(|| missing("prior"))?,
            dataset: dataset.ok_or_else(|| missing("dataset"))?,
            rows,
        })
    }
}

/// Loading or validating a sweep table failed.
#[derive(Debug)]
pub enum TableIoError {
    Io(std::io::Error),
    Parse { line: usize, message: String },
}

impl fmt::Display for TableIoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TableIoError::Io(e) => write!(f, "sweep table io: {e}"),
            TableIoError::Parse { line, message } => {
                write!(f, "sweep table line {line}: {message}")
            }
        }
    }
}

impl std::error::Error for TableIoError {}

impl From<std::io::Error> for TableIoError {
    fn from(e: std::io::Error) -> Self {
        TableIoError::Io(e)
    }
}

pub fn save_sweep_table(table: &SweepTable, path: &Path) -> Result<(), TableIoError> {
    fs::write(path, table.to_text())?;
    Ok(())
}

pub fn load_sweep_table(path: &Path) -> Result<SweepTable, TableIoError> {
    SweepTable::from_text(&fs::read_to_string(path)?)
}

/// A selected best row together with its full record.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub row: SweepRow,
    pub record: RunRecord,
}

fn write_file(path: &Path, content: &str) -> Result<(), SweepError> {
    fs::write(path, content).map_err(|source| SweepError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn c_label(c: f64) -> String {
    format!("{c}").replace('.', "p").replace('-', "m")
}

/// Emit the report file families for a set of per-(k_x, C) selections:
/// free-action and MSE summaries per k_x, posterior trajectories with
/// two-standard-deviation bands, and inferred-vs-true state series.
/// Returns the written paths.
pub fn write_reports(
    selections: &[SelectionReport],
    ds: &Dataset,
    out_dir: &Path,
) -> Result<Vec<PathBuf>, SweepError> {
    let mut written = Vec::new();
    let mut k_values: Vec<usize> = selections.iter().map(|s| s.row.config.k_x).collect();
    k_values.sort_unstable();
    k_values.dedup();

    for &k in &k_values {
        let mut group: Vec<&SelectionReport> = selections
            .iter()
            .filter(|s| s.row.config.k_x == k)
            .collect();
        group.sort_by(|a, b| a.row.config.ratio_c.total_cmp(&b.row.config.ratio_c));

        let mut fa_table = String::from("# columns: c fa accuracy complexity\n");
        let mut mse_table = String::from("# columns: c mse mse_burned\n");
        for s in &group {
            let _ = writeln!(
                fa_table,
                "{}\t{}\t{}\t{}",
                s.row.config.ratio_c, s.row.fa, s.row.accuracy, s.row.complexity
            );
            let _ = writeln!(
                mse_table,
                "{}\t{}\t{}",
                s.row.config.ratio_c, s.row.mse, s.row.mse_burned
            );
        }
        let fa_path = out_dir.join(format!("fa_vs_c_kx{k}.tsv"));
        write_file(&fa_path, &fa_table)?;
        written.push(fa_path);
        let mse_path = out_dir.join(format!("mse_vs_c_kx{k}.tsv"));
        write_file(&mse_path, &mse_table)?;
        written.push(mse_path);
    }

    for s in selections {
        let k = s.row.config.k_x;
        let c = c_label(s.row.config.ratio_c);
        let p = s.record.model.param_dim();

        // Parameter trajectory with mean +/- 2 sqrt(var) bands.
        let mut theta = String::from("# columns: j");
        for name in s.record.model.param_names() {
            let _ = write!(theta, " {name} {name}_lower {name}_upper");
        }
        theta.push('\n');
        for e in &s.record.em_events {
            let _ = write!(theta, "{}", e.j);
            for q in 0..p {
                let half = 2.0 * e.sigma_theta_diag[q].sqrt();
                let _ = write!(
                    theta,
                    "\t{}\t{}\t{}",
                    e.mu_theta[q],
                    e.mu_theta[q] - half,
                    e.mu_theta[q] + half
                );
            }
            theta.push('\n');
        }
        let theta_path = out_dir.join(format!("theta_kx{k}_c{c}.tsv"));
        write_file(&theta_path, &theta)?;
        written.push(theta_path);

        let mut lambda = String::from("# columns: j");
        for i in 0..6 {
            let name = if i < 3 {
                format!("lambda_x{}", i + 1)
            } else {
                format!("lambda_y{}", i - 2)
            };
            let _ = write!(lambda, " {name} {name}_lower {name}_upper");
        }
        lambda.push('\n');
        for e in &s.record.em_events {
            let _ = write!(lambda, "{}", e.j);
            for i in 0..6 {
                let half = 2.0 * e.sigma_lambda_diag[i].sqrt();
                let _ = write!(
                    lambda,
                    "\t{}\t{}\t{}",
                    e.mu_lambda[i],
                    e.mu_lambda[i] - half,
                    e.mu_lambda[i] + half
                );
            }
            lambda.push('\n');
        }
        let lambda_path = out_dir.join(format!("lambda_kx{k}_c{c}.tsv"));
        write_file(&lambda_path, &lambda)?;
        written.push(lambda_path);

        let mut states = String::from("# columns: t x1 x2 x3 mu1 mu2 mu3\n");
        for step in &s.record.steps {
            if step.t >= ds.states.len() {
                continue;
            }
            let x = ds.states[step.t];
            let _ = writeln!(
                states,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                step.t, x[0], x[1], x[2], step.mu_x[0], step.mu_x[1], step.mu_x[2]
            );
        }
        let states_path = out_dir.join(format!("states_kx{k}_c{c}.tsv"));
        write_file(&states_path, &states)?;
        written.push(states_path);
    }

    Ok(written)
}
