//! `odem`: generate datasets, run the online generalised filter, sweep
//! configuration grids, and distil the results, all driven by one TOML
//! config file.
//!
//! Exit codes: 0 success, 1 runtime failure (missing files, diverged
//! runs), 2 config violation. Config errors always name the offending
//! field; nothing is read from the environment.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::ConfigFile;
use odem_core::harness::{self, SelectionReport, SweepGrid};
use odem_core::odem::{self, RunError};
use odem_core::simulate;

#[derive(Parser)]
#[command(
    name = "odem",
    version,
    about = "Online generalised filtering on chaotic benchmarks",
    long_about = "Simulate smooth-noise datasets, run the online \
                  expectation-maximisation filter over them, grid-search its \
                  tuning, and write report tables. All commands read the same \
                  TOML config; see the repository README for the schema."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a noisy dataset from the `[dataset]` section.
    Simulate {
        /// TOML config file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the online loop over a dataset with the `[odem]` settings.
    Run {
        /// TOML config file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset file produced by `simulate`.
        #[arg(long)]
        dataset: PathBuf,
        /// Run-record file to write (kept, partial, even on failure).
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search `[odem]` variations over a dataset.
    Sweep {
        /// TOML config file.
        #[arg(long)]
        config: PathBuf,
        /// Dataset file produced by `simulate`.
        #[arg(long)]
        dataset: PathBuf,
        /// Directory for sweep.txt and the per-run records.
        #[arg(long)]
        out_dir: PathBuf,
        /// Worker threads, 0 = one per core; overrides `[sweep] workers`.
        #[arg(long)]
        workers: Option<usize>,
        /// Run the full published grid instead of the desk-scale one;
        /// overrides `[sweep] full_grid`.
        #[arg(long)]
        full_grid: bool,
    },
    /// Print the lowest-free-action sweep row within one (k_x, C) stratum.
    Select {
        /// Sweep table written by `sweep`.
        #[arg(long)]
        table: PathBuf,
        /// Embedding orders of the stratum.
        #[arg(long)]
        kx: usize,
        /// Precision ratio C of the stratum.
        #[arg(long)]
        ratio: f64,
    },
    /// Write report tables for the best row of every (k_x, C) stratum.
    Report {
        /// Sweep table written by `sweep`; records are loaded from its
        /// directory.
        #[arg(long)]
        table: PathBuf,
        /// Dataset the sweep ran on.
        #[arg(long)]
        dataset: PathBuf,
        /// Directory for the report files.
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Exit path: 2 for config violations, 1 for everything else that fails.
enum CliError {
    Schema(String),
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Schema(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<config::SchemaError> for CliError {
    fn from(e: config::SchemaError) -> Self {
        CliError::Schema(e.to_string())
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Simulate { config, out } => cmd_simulate(&config, &out),
        Command::Run {
            config,
            dataset,
            out,
        } => cmd_run(&config, &dataset, &out),
        Command::Sweep {
            config,
            dataset,
            out_dir,
            workers,
            full_grid,
        } => cmd_sweep(&config, &dataset, &out_dir, workers, full_grid),
        Command::Select { table, kx, ratio } => cmd_select(&table, kx, ratio),
        Command::Report {
            table,
            dataset,
            out_dir,
        } => cmd_report(&table, &dataset, &out_dir),
    }
}

fn load_config(path: &Path) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Runtime(format!("reading config {}: {e}", path.display())))?;
    Ok(ConfigFile::parse(&text)?)
}

fn load_dataset(path: &Path) -> Result<simulate::Dataset, CliError> {
    simulate::load_dataset(path)
        .map_err(|e| CliError::Runtime(format!("dataset {}: {e}", path.display())))
}

fn load_table(path: &Path) -> Result<harness::SweepTable, CliError> {
    harness::load_sweep_table(path)
        .map_err(|e| CliError::Runtime(format!("sweep table {}: {e}", path.display())))
}

fn checked_odem(cfg: &ConfigFile) -> Result<(), CliError> {
    cfg.odem
        .validate()
        .map_err(|e| CliError::Schema(format!("config field odem.{}: {}", e.field, e.message)))
}

fn cmd_simulate(config: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let p = cfg.dataset_params()?;
    let ds = simulate::generate(
        &p.model,
        &p.theta,
        p.x0,
        p.t_total,
        p.dt,
        p.state_noise,
        p.obs_noise,
    )
    .map_err(|e| match e {
        simulate::SimError::InvalidSpec { field, message } => {
            CliError::Schema(format!("config field dataset.{field}: {message}"))
        }
        other => CliError::Runtime(other.to_string()),
    })?;
    simulate::save_dataset(&ds, out)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", out.display())))?;
    println!(
        "simulated {} points of {} (t_total {}, dt {}, state seed {}, obs seed {}) -> {}",
        ds.len(),
        ds.meta.model.family_name(),
        ds.meta.t_total,
        ds.meta.dt,
        ds.meta.state_noise.seed,
        ds.meta.obs_noise.seed,
        out.display()
    );
    Ok(())
}

fn cmd_run(config: &Path, dataset: &Path, out: &Path) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let (model, prior) = cfg.model_params()?;
    checked_odem(&cfg)?;
    let ds = load_dataset(dataset)?;
    match odem::run_odem(&ds, &cfg.odem, &model, &prior) {
        Ok(record) => {
            odem::save_run_record(&record, out)
                .map_err(|e| CliError::Runtime(format!("writing {}: {e}", out.display())))?;
            println!(
                "{} steps, {} em events, final free action {:.6e}, mse {:.6e} -> {}",
                record.steps.len(),
                record.em_events.len().saturating_sub(1),
                record.final_fa(),
                harness::mse_of_record(&record, &ds),
                out.display()
            );
            Ok(())
        }
        Err(RunError::Config(e)) => Err(CliError::Schema(format!(
            "config field odem.{}: {}",
            e.field, e.message
        ))),
        Err(RunError::Step {
            step,
            cause,
            partial,
        }) => {
            // A diverged run is still evidence: keep what it produced.
            let note = match odem::save_run_record(&partial, out) {
                Ok(()) => format!(
                    "partial record ({} steps) kept at {}",
                    partial.steps.len(),
                    out.display()
                ),
                Err(e) => format!("partial record could not be written: {e}"),
            };
            Err(CliError::Runtime(format!(
                "run failed at step {step}: {cause}; {note}"
            )))
        }
    }
}

fn cmd_sweep(
    config: &Path,
    dataset: &Path,
    out_dir: &Path,
    workers: Option<usize>,
    full_grid: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let (model, prior) = cfg.model_params()?;
    checked_odem(&cfg)?;
    let ds = load_dataset(dataset)?;
    let workers = workers.unwrap_or(cfg.sweep.workers);
    let grid = if full_grid || cfg.sweep.full_grid {
        SweepGrid::full()
    } else {
        SweepGrid::ci()
    };
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out_dir.display())))?;
    let table = harness::run_sweep(
        &ds,
        &cfg.odem,
        &grid,
        &model,
        &prior,
        workers,
        Some(out_dir),
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;
    let table_path = out_dir.join("sweep.txt");
    harness::save_sweep_table(&table, &table_path)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", table_path.display())))?;
    let ok = table.rows.iter().filter(|r| r.status.is_ok()).count();
    println!(
        "swept {} configs ({} ok, {} failed) -> {}",
        table.rows.len(),
        ok,
        table.rows.len() - ok,
        table_path.display()
    );
    Ok(())
}

fn cmd_select(table_path: &Path, kx: usize, ratio: f64) -> Result<(), CliError> {
    let table = load_table(table_path)?;
    let row = harness::select_best(&table.rows, kx, ratio)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let c = &row.config;
    println!(
        "best row {}: k_x {} C {} kappa {} inter_em {} beta_lambda {} beta_theta {} \
         sigma_lambda_x {} sigma_lambda_y {}",
        row.index,
        c.k_x,
        c.ratio_c,
        c.kappa,
        c.inter_em,
        c.beta_lambda,
        c.beta_theta,
        c.sigma_lambda_x,
        c.sigma_lambda_y
    );
    println!(
        "fa {:.6e} accuracy {:.6e} complexity {:.6e} mse {:.6e} mse_burned {:.6e} record {}",
        row.fa,
        row.accuracy,
        row.complexity,
        row.mse,
        row.mse_burned,
        row.record_file.as_deref().unwrap_or("-")
    );
    Ok(())
}

fn cmd_report(table_path: &Path, dataset: &Path, out_dir: &Path) -> Result<(), CliError> {
    let table = load_table(table_path)?;
    let ds = load_dataset(dataset)?;
    if table.dataset != ds.meta {
        return Err(CliError::Runtime(format!(
            "dataset {} does not match the one the sweep ran on",
            dataset.display()
        )));
    }
    let record_dir = table_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut selections = Vec::new();
    for (k_x, c) in harness::strata(&table.rows) {
        // A stratum whose every run failed has nothing to report.
        let Ok(row) = harness::select_best(&table.rows, k_x, c) else {
            continue;
        };
        let name = row.record_file.clone().ok_or_else(|| {
            CliError::Runtime(format!(
                "sweep row {} has no record file; rerun `sweep` with this tool",
                row.index
            ))
        })?;
        let path = record_dir.join(&name);
        let record = odem::load_run_record(&path)
            .map_err(|e| CliError::Runtime(format!("record {}: {e}", path.display())))?;
        selections.push(SelectionReport {
            row: row.clone(),
            record,
        });
    }
    if selections.is_empty() {
        return Err(CliError::Runtime(
            "no successful sweep rows to report on".into(),
        ));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out_dir.display())))?;
    let written = harness::write_reports(&selections, &ds, out_dir)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "wrote {} report files to {}",
        written.len(),
        out_dir.display()
    );
    for path in &written {
        println!("  {}", path.display());
    }
    Ok(())
}
