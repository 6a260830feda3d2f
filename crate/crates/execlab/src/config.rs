//! Experiment configuration: TOML sections, validation, and canonical
//! hashing so every artifact can name the exact run that produced it.
//!
//! A configuration has four sections: `[model]` (market and preference
//! constants), `[factor]` (the resilience/risk factor family), `[numerics]`
//! (grids and tolerances, all defaulted), and `[run]` (eta/seed/penalty
//! sweeps plus the output directory).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coeffs::SolverOptions;
use crate::io::stable_hash_hex;
use crate::model::{self, FactorFamily, FactorModel, ModelParams, Penalty};
use crate::pathsim::TimeGrid;

/// Configuration faults: unreadable, unparsable, or invalid contents.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("configuration does not parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("configuration is invalid: {0}")]
    Invalid(String),
}

/// `[model]` section. The horizon is spelled `T` in files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub gamma: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub x0: f64,
    /// Default penalty when `[run] n_values` is absent; `"inf"` enforces
    /// exact liquidation.
    #[serde(default = "strict")]
    pub penalty: Penalty,
}

fn strict() -> Penalty {
    Penalty::Strict
}

/// `[numerics]` section; every field has a default tuned for the standard
/// horizon-one experiments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsSection {
    /// Base number of uniform time steps before terminal refinement.
    pub time_steps: usize,
    /// Fraction of the horizon covered by the geometrically refined tail.
    pub refine_fraction: f64,
    /// Number of halvings inside the refined tail.
    pub refine_levels: u32,
    /// Factor-grid nodes for the spatial solver (stochastic factors only).
    pub chi_nodes: usize,
    /// Half-width of the factor grid in driver standard deviations.
    pub chi_stddevs: f64,
    /// Start-up distance multiplier for the exact-liquidation solver.
    pub delta0: f64,
    /// Band half-width used by convergence studies.
    pub eps_band: f64,
    /// Graph-distance resolution; derived from the grid when absent.
    pub hausdorff_resolution: Option<f64>,
}

impl Default for NumericsSection {
    fn default() -> Self {
        NumericsSection {
            time_steps: 4096,
            refine_fraction: 0.05,
            refine_levels: 11,
            chi_nodes: 65,
            chi_stddevs: 6.0,
            delta0: 1e-2,
            eps_band: 0.05,
            hausdorff_resolution: None,
        }
    }
}

/// `[run]` section: sweeps and artifact destination.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Instantaneous-impact sweep; positive, conventionally decreasing.
    pub etas: Vec<f64>,
    /// Scenario seeds; must be distinct so paths are independent.
    pub seeds: Vec<u64>,
    /// Optional penalty sweep overriding the model default.
    #[serde(default)]
    pub n_values: Vec<Penalty>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A full experiment description, loadable from TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub factor: FactorFamily,
    #[serde(default)]
    pub numerics: NumericsSection,
    pub run: RunSection,
}

impl ExperimentConfig {
    /// Parse and validate a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, parse, and validate a configuration file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Check every invariant, reporting the first violation found.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run.etas.is_empty() {
            return Err(ConfigError::Invalid("run.etas must not be empty".into()));
        }
        if let Some(bad) = self.run.etas.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(ConfigError::Invalid(format!(
                "run.etas must be positive and finite, got {bad}"
            )));
        }
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("run.seeds must not be empty".into()));
        }
        let mut seen = self.run.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.run.seeds.len() {
            return Err(ConfigError::Invalid("run.seeds must be distinct".into()));
        }
        let n = &self.numerics;
        if n.time_steps < 16
            || !(n.refine_fraction > 0.0 && n.refine_fraction < 1.0)
            || n.chi_nodes < 3
            || !(n.chi_stddevs > 0.0)
            || !(n.delta0 > 0.0)
            || !(n.eps_band > 0.0 && n.eps_band < 0.5 * self.model.horizon)
        {
            return Err(ConfigError::Invalid(
                "numerics section out of range (time_steps >= 16, 0 < refine_fraction < 1, \
                 chi_nodes >= 3, chi_stddevs > 0, delta0 > 0, 0 < eps_band < T/2)"
                    .into(),
            ));
        }
        for &eta in &self.run.etas {
            for penalty in self.penalties() {
                let params = self.params_for(eta, penalty);
                let report = model::validate(&params);
                if !report.is_valid() {
                    return Err(ConfigError::Invalid(format!(
                        "model at eta = {eta}: {report}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Penalty sweep: `run.n_values` when present, else the model default.
    pub fn penalties(&self) -> Vec<Penalty> {
        if self.run.n_values.is_empty() {
            vec![self.model.penalty]
        } else {
            self.run.n_values.clone()
        }
    }

    /// Model parameters for one sweep point, with factor-implied envelopes.
    pub fn params_for(&self, eta: f64, penalty: Penalty) -> ModelParams {
        ModelParams {
            gamma: self.model.gamma,
            horizon: self.model.horizon,
            x0: self.model.x0,
            eta,
            penalty,
            rho_bounds: self.factor.implied_rho_bounds(),
            lambda_max: self.factor.implied_lambda_max(),
        }
    }

    /// Instantiate the factor model.
    pub fn factor(&self) -> FactorModel {
        self.factor.build()
    }

    /// Simulation grid with the terminal refinement the numerics request.
    pub fn grid(&self) -> Arc<TimeGrid> {
        TimeGrid::refined(
            self.model.horizon,
            self.numerics.time_steps,
            self.numerics.refine_fraction,
            self.numerics.refine_levels,
        )
    }

    /// Backward-solver options from the numerics section.
    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions { delta0: self.numerics.delta0, ..SolverOptions::default() }
    }

    /// Graph-distance resolution: explicit override or grid-derived default.
    pub fn hausdorff_resolution(&self, grid: &TimeGrid) -> f64 {
        self.numerics
            .hausdorff_resolution
            .unwrap_or_else(|| grid.dt_max / 4.0 * self.model.x0.min(1.0).max(1e-6))
    }

    /// Canonical serialized form; equal configurations hash equally even
    /// when the source files differ in comments or key order.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// Stable hash of the canonical form, embedded in every artifact.
    pub fn config_hash(&self) -> String {
        stable_hash_hex(self.canonical_toml().as_bytes())
    }
}
