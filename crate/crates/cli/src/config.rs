//! TOML configuration for the `odem` binary.
//!
//! One file drives every subcommand. The `schema` key is mandatory so stale
//! configs fail loudly, unknown keys are rejected everywhere, and every
//! validation error names the offending field.

use std::fmt;

use odem_core::dynamics::{ModelSpec, ParamPrior};
use odem_core::odem::OdemConfig;
use odem_core::simulate::{self, NoiseSpec};
use serde::Deserialize;

/// The config format this binary understands.
pub const SCHEMA_VERSION: u32 = 1;

/// A rejected config: either unparseable TOML or a well-formed value that
/// violates a constraint.
#[derive(Debug, Clone, PartialEq)]
pub enum SchemaError {
    /// Syntax, type, or unknown-key problem; the message carries the line
    /// and column straight from the TOML parser.
    Parse(String),
    Field {
        field: String,
        message: String,
    },
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemaError::Parse(m) => write!(f, "config parse error:\n{m}"),
            SchemaError::Field { field, message } => {
                write!(f, "config field {field}: {message}")
            }
        }
    }
}

impl std::error::Error for SchemaError {}

fn bad(field: impl Into<String>, message: impl Into<String>) -> SchemaError {
    SchemaError::Field {
        field: field.into(),
        message: message.into(),
    }
}

/// Top-level config. Every section is optional and defaults to the
/// published experiment settings; `schema` is not.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema: u32,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub odem: OdemConfig,
    #[serde(default)]
    pub sweep: SweepSection,
}

/// `[dataset]`: what `simulate` should generate.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Generating family, "glv" or "lorenz".
    pub family: String,
    /// Interaction parameters; omitted means the family's published values.
    pub theta: Option<Vec<f64>>,
    pub x0: [f64; 3],
    pub t_total: f64,
    pub dt: f64,
    pub state_noise: NoiseSpec,
    pub obs_noise: NoiseSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            family: "glv".into(),
            theta: None,
            x0: simulate::DEFAULT_X0,
            t_total: 100.0,
            dt: 0.01,
            state_noise: NoiseSpec::state_default(1),
            obs_noise: NoiseSpec::obs_default(2),
        }
    }
}

/// `[model]`: the generative family the filter assumes plus its parameter
/// prior.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: String,
    /// Omitted means the family's default prior.
    pub prior: Option<PriorSection>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            family: "glv".into(),
            prior: None,
        }
    }
}

/// `[model.prior]`: diagonal Gaussian over the model parameters.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSection {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// `[sweep]`: grid-search execution knobs, overridable from the command
/// line.
#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// Worker threads; 0 picks one per core.
    pub workers: usize,
    /// Use the full published grid instead of the desk-scale one.
    pub full_grid: bool,
}

/// Resolved `[dataset]` values, ready for the generator.
#[derive(Debug, Clone)]
pub struct DatasetParams {
    pub model: ModelSpec,
    pub theta: Vec<f64>,
    pub x0: [f64; 3],
    pub t_total: f64,
    pub dt: f64,
    pub state_noise: NoiseSpec,
    pub obs_noise: NoiseSpec,
}

fn family(field: &str, name: &str) -> Result<ModelSpec, SchemaError> {
    match name {
        "glv" => Ok(ModelSpec::glv()),
        "lorenz" => Ok(ModelSpec::lorenz()),
        other => Err(bad(
            field,
            format!("unknown family {other:?}, expected \"glv\" or \"lorenz\""),
        )),
    }
}

impl ConfigFile {
    /// Parse TOML and check the version gate. Numeric range checks happen
    /// later, section by section, so errors name the exact field.
    pub fn parse(text: &str) -> Result<ConfigFile, SchemaError> {
        let cfg: ConfigFile =
            toml::from_str(text).map_err(|e| SchemaError::Parse(e.to_string()))?;
        if cfg.schema != SCHEMA_VERSION {
            return Err(bad(
                "schema",
                format!(
                    "unsupported version {}, this binary reads {SCHEMA_VERSION}",
                    cfg.schema
                ),
            ));
        }
        Ok(cfg)
    }

    /// Resolve the `[dataset]` section. Positivity of dt and t_total and
    /// the noise geometry are checked by the generator itself, which also
    /// names fields.
    pub fn dataset_params(&self) -> Result<DatasetParams, SchemaError> {
        let model = family("dataset.family", &self.dataset.family)?;
        let theta = self
            .dataset
            .theta
            .clone()
            .unwrap_or_else(|| model.true_params());
        if theta.len() != model.param_dim() {
            return Err(bad(
                "dataset.theta",
                format!(
                    "{} expects {} values, got {}",
                    model.family_name(),
                    model.param_dim(),
                    theta.len()
                ),
            ));
        }
        Ok(DatasetParams {
            model,
            theta,
            x0: self.dataset.x0,
            t_total: self.dataset.t_total,
            dt: self.dataset.dt,
            state_noise: self.dataset.state_noise.clone(),
            obs_noise: self.dataset.obs_noise.clone(),
        })
    }

    /// Resolve the `[model]` section into the generative family and its
    /// parameter prior.
    pub fn model_params(&self) -> Result<(ModelSpec, ParamPrior), SchemaError> {
        let model = family("model.family", &self.model.family)?;
        let d = model.param_dim();
        let prior = match &self.model.prior {
            None => model.default_prior(),
            Some(p) => {
                if p.mean.len() != d {
                    return Err(bad(
                        "model.prior.mean",
                        format!(
                            "{} expects {d} values, got {}",
                            model.family_name(),
                            p.mean.len()
                        ),
                    ));
                }
                if p.var.len() != d {
                    return Err(bad(
                        "model.prior.var",
                        format!(
                            "{} expects {d} values, got {}",
                            model.family_name(),
                            p.var.len()
                        ),
                    ));
                }
                for (i, &m) in p.mean.iter().enumerate() {
                    if !m.is_finite() {
                        return Err(bad(
                            "model.prior.mean",
                            format!("entry {i} must be finite, got {m}"),
                        ));
                    }
                }
                for (i, &v) in p.var.iter().enumerate() {
                    if !(v > 0.0) || !v.is_finite() {
                        return Err(bad(
                            "model.prior.var",
                            format!("entry {i} must be positive and finite, got {v}"),
                        ));
                    }
                }
                ParamPrior {
                    mean: p.mean.clone(),
                    var: p.var.clone(),
                }
            }
        };
        Ok((model, prior))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_every_default() {
        let cfg = ConfigFile::parse("schema = 1\n").unwrap();
        assert_eq!(cfg.dataset, DatasetSection::default());
        assert_eq!(cfg.model, ModelSection::default());
        assert_eq!(cfg.odem, OdemConfig::default());
        assert_eq!(cfg.sweep, SweepSection::default());
        let p = cfg.dataset_params().unwrap();
        assert_eq!(p.model, ModelSpec::glv());
        assert_eq!(p.theta, ModelSpec::glv().true_params());
        assert_eq!(p.t_total, 100.0);
        let (model, prior) = cfg.model_params().unwrap();
        assert_eq!(prior.mean.len(), model.param_dim());
    }

    #[test]
    fn missing_schema_key_is_a_parse_error() {
        let err = ConfigFile::parse("").unwrap_err();
        assert!(matches!(&err, SchemaError::Parse(m) if m.contains("schema")));
    }

    #[test]
    fn wrong_schema_version_names_the_field() {
        let err = ConfigFile::parse("schema = 7\n").unwrap_err();
        assert!(matches!(&err, SchemaError::Field { field, .. } if field == "schema"));
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            "schema = 1\nbogus = 2\n",
            "schema = 1\n[dataset]\nbogus = 2\n",
            "schema = 1\n[odem]\nbogus = 2\n",
            "schema = 1\n[sweep]\nbogus = 2\n",
        ] {
            let err = ConfigFile::parse(text).unwrap_err();
            assert!(
                matches!(&err, SchemaError::Parse(m) if m.contains("bogus")),
                "{text:?} -> {err}"
            );
        }
    }

    #[test]
    fn sections_override_defaults() {
        let text = "\
schema = 1

[dataset]
family = \"lorenz\"
t_total = 2.0
dt = 0.02

[dataset.state_noise]
white_std = 0.2
kernel_size = 31
kernel_var = 0.004
seed = 9

[model]
family = \"lorenz\"

[model.prior]
mean = [24.0]
var = [4.0]

[odem]
kappa = 1.0
inter_em = 64

[sweep]
workers = 3
full_grid = true
";
        let cfg = ConfigFile::parse(text).unwrap();
        let p = cfg.dataset_params().unwrap();
        assert_eq!(p.model, ModelSpec::lorenz());
        assert_eq!(p.theta, ModelSpec::lorenz().true_params());
        assert_eq!(p.dt, 0.02);
        assert_eq!(p.state_noise.white_std, 0.2);
        assert_eq!(p.state_noise.seed, 9);
        assert_eq!(p.obs_noise, NoiseSpec::obs_default(2));
        let (model, prior) = cfg.model_params().unwrap();
        assert_eq!(model, ModelSpec::lorenz());
        assert_eq!(prior.mean, vec![24.0]);
        assert_eq!(prior.var, vec![4.0]);
        assert_eq!(cfg.odem.kappa, 1.0);
        assert_eq!(cfg.odem.inter_em, 64);
        assert_eq!(cfg.odem.k_x, OdemConfig::default().k_x);
        assert_eq!(cfg.sweep.workers, 3);
        assert!(cfg.sweep.full_grid);
    }

    #[test]
    fn unknown_family_names_the_field() {
        let cfg = ConfigFile::parse("schema = 1\n[dataset]\nfamily = \"ou\"\n").unwrap();
        let err = cfg.dataset_params().unwrap_err();
        assert!(matches!(&err, SchemaError::Field { field, .. } if field == "dataset.family"));

        let cfg = ConfigFile::parse("schema = 1\n[model]\nfamily = \"ou\"\n").unwrap();
        let err = cfg.model_params().unwrap_err();
        assert!(matches!(&err, SchemaError::Field { field, .. } if field == "model.family"));
    }

    #[test]
    fn theta_length_is_checked_against_the_family() {
        let cfg = ConfigFile::parse("schema = 1\n[dataset]\ntheta = [1.0, 2.0]\n").unwrap();
        let err = cfg.dataset_params().unwrap_err();
        assert!(matches!(&err, SchemaError::Field { field, .. } if field == "dataset.theta"));
    }

    #[test]
    fn prior_shape_and_positivity_are_checked() {
        let cfg =
            ConfigFile::parse("schema = 1\n[model.prior]\nmean = [0.0]\nvar = [1.0]\n").unwrap();
        let err = cfg.model_params().unwrap_err();
        assert!(matches!(&err, SchemaError::Field { field, .. } if field == "model.prior.mean"));

        let cfg = ConfigFile::parse(
            "schema = 1\n[model.prior]\nmean = [0.0, 0.0, 0.0]\nvar = [1.0, 0.0, 1.0]\n",
        )
        .unwrap();
        let err = cfg.model_params().unwrap_err();
        assert!(matches!(&err, SchemaError::Field { field, .. } if field == "model.prior.var"));
    }
}
