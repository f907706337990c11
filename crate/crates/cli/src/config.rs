//! Run configuration: a JSON file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use spillover::inference::BootstrapInterval;
use spillover::simgen::{OracleMethod, Scenario, Scenario1Params, Scenario2Params};
use spillover::{ColumnSchema, DesignPropensity, EffectKind};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum GammaSpec {
    /// Explicit policy coefficients, one vector per policy.
    Values(Vec<Vec<f64>>),
    /// Data-driven percentile ranges per covariate, discretized.
    Auto(AutoGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoGrid {
    /// Covariate names; empty means all.
    pub covariates: Vec<String>,
    pub points: usize,
    pub percentiles: (f64, f64),
}

impl Default for AutoGrid {
    fn default() -> Self {
        Self {
            covariates: Vec::new(),
            points: spillover::gamma_grid::DEFAULT_POINTS,
            percentiles: spillover::gamma_grid::DEFAULT_PERCENTILES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSettings {
    pub method: OracleMethod,
    pub reps: usize,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self { method: OracleMethod::Mc, reps: 2000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub input: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
    pub columns: Option<ColumnSchema>,
    pub design: Option<DesignPropensity>,
    pub alpha: Option<f64>,
    pub gamma: Option<GammaSpec>,
    pub seed: Option<u64>,
    #[serde(rename = "B")]
    pub draws: Option<usize>,
    pub boot_reps: Option<usize>,
    pub boot_interval: Option<BootstrapInterval>,
    pub level: Option<f64>,
    pub effect: Option<EffectKind>,
    pub s1: Option<Vec<Vec<f64>>>,
    pub s2: Option<Vec<Vec<f64>>>,
    pub max_relative_weight: Option<f64>,
    pub scenario: Option<Scenario>,
    pub oracle: Option<OracleSettings>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON form, excluding the output location.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn require_seed(&self) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::Config("this command is stochastic and needs an explicit --seed".into()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn level(&self) -> f64 {
        self.level.unwrap_or(0.95)
    }

    pub fn scenario(&self) -> Scenario {
        self.scenario.unwrap_or(Scenario::Linear(Scenario1Params::default()))
    }
}

/// Parses `--scenario`: `linear`/`1` or `diffusion`/`2`.
pub fn parse_scenario(name: &str) -> Result<Scenario, CliError> {
    match name {
        "1" | "linear" => Ok(Scenario::Linear(Scenario1Params::default())),
        "2" | "diffusion" => Ok(Scenario::Diffusion(Scenario2Params::default())),
        other => Err(CliError::Config(format!("unknown scenario {other:?}; use linear (1) or diffusion (2)"))),
    }
}

/// Parses `--gamma "g11,g12;g21,g22"`.
pub fn parse_gamma_list(text: &str) -> Result<Vec<Vec<f64>>, CliError> {
    text.split(';')
        .filter(|v| !v.trim().is_empty())
        .map(|v| {
            v.split(',')
                .map(|x| {
                    x.trim()
                        .parse::<f64>()
                        .map_err(|_| CliError::Config(format!("bad gamma component {x:?} in {text:?}")))
                })
                .collect()
        })
        .collect()
}
