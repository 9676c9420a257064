//! Run configuration (TOML, versioned schema, unknown keys rejected).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsde::{Covariates, SolverSettings};
use crate::contract::{CollateralMap, ContractSpec, Flow};
use crate::credit::CreditModel;
use crate::error::{Result, XvaError};
use crate::grid::TimeGrid;
use crate::market::{validate_market, MarketParams, SimSettings};
use crate::regression::RegressionSettings;
use crate::xva::{EstimatorMode, XvaConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub horizon: f64,
    pub n_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub n_paths: usize,
    pub seed: u64,
    #[serde(default = "one")]
    pub brownian_substeps: usize,
    /// Size of the independent risk-neutral bundle used for the clean value;
    /// defaults to `n_paths`.
    #[serde(default)]
    pub n_paths_clean: Option<usize>,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSection {
    pub recovery_bank: f64,
    pub recovery_counterparty: f64,
    pub collateral: CollateralMap,
    #[serde(default)]
    pub flows: Vec<Flow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_degree")]
    pub basis_degree: usize,
    #[serde(default = "one")]
    pub picard_iters: usize,
    #[serde(default = "default_ridge")]
    pub ridge_lambda: f64,
    #[serde(default)]
    pub covariates: Covariates,
}

fn default_degree() -> usize {
    3
}
fn default_ridge() -> f64 {
    1e-8
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            basis_degree: 3,
            picard_iters: 1,
            ridge_lambda: 1e-8,
            covariates: Covariates::Auto,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XvaSection {
    #[serde(default)]
    pub mode: EstimatorMode,
    #[serde(default)]
    pub two_step: bool,
    #[serde(default = "default_inner")]
    pub n_inner: usize,
    #[serde(default = "default_hurdle")]
    pub hurdle_rate: f64,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub capital_horizon: Option<f64>,
    #[serde(default)]
    pub strict_paper: bool,
    #[serde(default = "default_tol")]
    pub decomposition_tol_abs: f64,
}

fn default_inner() -> usize {
    64
}
fn default_hurdle() -> f64 {
    0.1
}
fn default_confidence() -> f64 {
    0.975
}
fn default_tol() -> f64 {
    1e-6
}

impl Default for XvaSection {
    fn default() -> Self {
        let c = XvaConfig::default();
        Self {
            mode: c.mode,
            two_step: c.two_step,
            n_inner: c.n_inner,
            hurdle_rate: c.hurdle_rate,
            confidence: c.confidence,
            capital_horizon: c.capital_horizon,
            strict_paper: c.strict_paper,
            decomposition_tol_abs: c.decomposition_tol_abs,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    /// Reuse cached stages when the config hash matches.
    #[default]
    Reuse,
    /// Recompute and overwrite.
    Refresh,
    /// Neither read nor write the cache.
    Off,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_policy: CachePolicy,
}

fn default_out() -> PathBuf {
    PathBuf::from("xva-out")
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            output_dir: default_out(),
            cache_policy: CachePolicy::Reuse,
        }
    }
}

/// Full run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub grid: GridSection,
    pub mc: McSection,
    pub market: MarketParams,
    pub credit: CreditModel,
    pub contract: ContractSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub xva: XvaSection,
    #[serde(default)]
    pub run: RunSection,
}

/// Maps a TOML deserialization error onto a configuration error that names the field.
fn toml_error(e: toml::de::Error) -> XvaError {
    let msg = e.message().to_string();
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".to_string());
    let location = e
        .span()
        .map(|s| format!(" (bytes {}..{})", s.start, s.end))
        .unwrap_or_default();
    XvaError::config(field, format!("{msg}{location}"))
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(toml_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("configuration is always serializable")
    }

    /// Checks schema version, value ranges and cross references.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(XvaError::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let grid = self.time_grid()?;
        if self.mc.n_paths == 0 {
            return Err(XvaError::config("mc.n_paths", "must be positive"));
        }
        if self.mc.n_paths_clean == Some(0) {
            return Err(XvaError::config("mc.n_paths_clean", "must be positive"));
        }
        if self.mc.brownian_substeps == 0 {
            return Err(XvaError::config("mc.brownian_substeps", "must be positive"));
        }
        self.market.check_schema()?;
        validate_market(&self.market).into_result()?;
        self.credit.validate()?;
        self.contract_spec().validate(&grid, self.market.dim())?;
        if self.solver.basis_degree == 0 || self.solver.basis_degree > 6 {
            return Err(XvaError::config("solver.basis_degree", "must lie in 1..=6"));
        }
        if !(self.solver.ridge_lambda > 0.0 && self.solver.ridge_lambda < 1.0) {
            return Err(XvaError::config("solver.ridge_lambda", "must lie in (0, 1)"));
        }
        self.xva_config().validate(&grid)?;
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.horizon, self.grid.n_steps).map_err(|e| match e {
            XvaError::Config { message, .. } => XvaError::config("grid", message),
            other => other,
        })
    }

    pub fn sim_settings(&self) -> SimSettings {
        SimSettings {
            n_paths: self.mc.n_paths,
            seed: self.mc.seed,
            substeps: self.mc.brownian_substeps,
        }
    }

    pub fn clean_sim_settings(&self) -> SimSettings {
        SimSettings {
            n_paths: self.mc.n_paths_clean.unwrap_or(self.mc.n_paths),
            ..self.sim_settings()
        }
    }

    pub fn contract_spec(&self) -> ContractSpec {
        ContractSpec {
            flows: self.contract.flows.clone(),
            recovery_bank: self.contract.recovery_bank,
            recovery_counterparty: self.contract.recovery_counterparty,
            collateral: self.contract.collateral,
        }
    }

    pub fn regression(&self) -> RegressionSettings {
        RegressionSettings {
            degree: self.solver.basis_degree,
            ridge_lambda: self.solver.ridge_lambda,
            ..RegressionSettings::default()
        }
    }

    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            regression: self.regression(),
            picard_iters: self.solver.picard_iters,
            covariates: self.solver.covariates,
        }
    }

    pub fn xva_config(&self) -> XvaConfig {
        XvaConfig {
            mode: self.xva.mode,
            two_step: self.xva.two_step,
            n_inner: self.xva.n_inner,
            hurdle_rate: self.xva.hurdle_rate,
            confidence: self.xva.confidence,
            capital_horizon: self.xva.capital_horizon,
            strict_paper: self.xva.strict_paper,
            decomposition_tol_abs: self.xva.decomposition_tol_abs,
        }
    }

    /// SHA-256 of the canonical serialization, excluding the output location.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.run = RunSection::default();
        let json = serde_json::to_string(&canon).expect("configuration is always serializable");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Hash of the inputs that determine the simulated scenarios only.
    pub fn scenario_hash(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            grid: &'a GridSection,
            mc: &'a McSection,
            market: &'a MarketParams,
            credit: &'a CreditModel,
        }
        let json = serde_json::to_string(&Key {
            grid: &self.grid,
            mc: &self.mc,
            market: &self.market,
            credit: &self.credit,
        })
        .expect("serializable");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
schema_version = 1
[grid]
horizon = 1.0
n_steps = 4
[mc]
n_paths = 100
seed = 1
[market]
k_r = 0.5
[[market.assets]]
s0 = 100.0
mu = 0.05
sigma = 0.2
repo_rate = 0.02
bound = 1.0
[market.rates]
funding = 0.02
discount = 0.02
coll_lend = 0.02
coll_borrow = 0.02
[credit.bank]
model = "constant"
lambda = 0.0
[credit.counterparty]
model = "constant"
lambda = 0.0
[contract]
recovery_bank = 0.4
recovery_counterparty = 0.4
collateral = { alpha = 0.0, threshold = 0.0 }
[[contract.flows]]
time = 1.0
notional = -1.0
payoff = { type = "call", asset = 0, strike = 100.0 }
"#;

    #[test]
    fn minimal_config_parses() {
        let c = RunConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.solver.basis_degree, 3);
        assert_eq!(c.mc.brownian_substeps, 1);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn unknown_key_is_an_error_naming_it() {
        let s = MINIMAL.replace("[grid]\n", "[grid]\nbogus = 3\n");
        let e = RunConfig::from_toml_str(&s).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn off_grid_flow_names_the_field() {
        let s = MINIMAL.replace("time = 1.0", "time = 0.3");
        let e = RunConfig::from_toml_str(&s).unwrap_err();
        assert!(e.to_string().contains("contract.flows[0].time"), "{e}");
    }

    #[test]
    fn hash_ignores_output_dir_but_not_seed() {
        let a = RunConfig::from_toml_str(MINIMAL).unwrap();
        let mut b = a.clone();
        b.run.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.mc.seed = 2;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn roundtrip_through_toml() {
        let a = RunConfig::from_toml_str(MINIMAL).unwrap();
        let b = RunConfig::from_toml_str(&a.to_toml_string()).unwrap();
        assert_eq!(a, b);
    }
}
