//! Scenario configuration: a flat TOML document with fail-fast parsing
//! (unknown keys are errors).

use crate::baselines::{CfParams, OcbfConfig, SdfKey};
use crate::dynamics::Limits;
use crate::error::Error;
use crate::mpc::MpcConfig;
use crate::safety::ClassKConfig;
use serde::{Deserialize, Serialize};

/// Controller selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Controller {
    MpcClbf,
    OcbfFifo,
    OcbfSdf,
    CfBaseline,
}

impl Controller {
    pub fn name(&self) -> &'static str {
        match self {
            Controller::MpcClbf => "mpc-clbf",
            Controller::OcbfFifo => "ocbf-fifo",
            Controller::OcbfSdf => "ocbf-sdf",
            Controller::CfBaseline => "cf-baseline",
        }
    }
}

impl std::str::FromStr for Controller {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "mpc-clbf" => Ok(Controller::MpcClbf),
            "ocbf-fifo" => Ok(Controller::OcbfFifo),
            "ocbf-sdf" => Ok(Controller::OcbfSdf),
            "cf-baseline" => Ok(Controller::CfBaseline),
            other => Err(Error::Config(format!(
                "unknown controller '{other}' (expected mpc-clbf|ocbf-fifo|ocbf-sdf|cf-baseline)"
            ))),
        }
    }
}

/// Full scenario description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    /// Simulated span (s).
    pub duration: f64,
    /// Step length (s).
    pub td: f64,
    pub seed: u64,
    /// Arrival rate per origin (CAV/h); one entry per CZ.
    pub arrival_rates: Vec<f64>,
    pub n_cz: usize,
    pub segment_length: f64,
    pub limits: Limits,
    /// Energy/time weight of the trip objective; the per-unit-time weight
    /// beta is derived from it.
    pub alpha: f64,
    pub controller: Controller,
    pub horizon: usize,
    pub lambda: f64,
    pub gammas: ClassKConfig,
    pub clbf_n: u32,
    pub p_default: f64,
    /// Extra clearance (m) the planner adds to its safety rows.
    pub safety_margin: f64,
    pub ocbf: OcbfConfig,
    pub cf: CfParams,
    pub sdf_key: SdfKey,
    /// Speed at which new CAVs enter (m/s).
    pub v_init: f64,
    /// Whether a trip may loop back to its entry CZ (full ring traversal).
    pub allow_full_loop: bool,
    /// Whether time waiting at the entrance for a safe gap counts as travel.
    pub count_queue_delay: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            duration: 300.0,
            td: 0.1,
            seed: 1,
            arrival_rates: vec![396.0; 3],
            n_cz: 3,
            segment_length: 60.0,
            limits: Limits::default(),
            alpha: 0.1,
            controller: Controller::MpcClbf,
            horizon: 10,
            lambda: 0.5,
            gammas: ClassKConfig::default(),
            clbf_n: 1,
            p_default: 1.0,
            safety_margin: 0.3,
            ocbf: OcbfConfig::default(),
            cf: CfParams::default(),
            sdf_key: SdfKey::TimeToMp,
            v_init: 10.0,
            allow_full_loop: false,
            count_queue_delay: false,
        }
    }
}

/// Per-unit-time objective weight derived from the energy/time trade-off:
/// beta = alpha * max(u_max^2, u_min^2) / (2 (1 - alpha)).
pub fn beta_from_alpha(alpha: f64, limits: &Limits) -> f64 {
    let u2 = (limits.u_max * limits.u_max).max(limits.u_min * limits.u_min);
    alpha * u2 / (2.0 * (1.0 - alpha))
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), Error> {
        self.limits.validate()?;
        if self.duration <= 0.0 || self.td <= 0.0 {
            return Err(Error::Config("duration and td must be > 0".into()));
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha must be in [0, 1), got {}",
                self.alpha
            )));
        }
        if self.n_cz < 2 {
            return Err(Error::Config("n_cz must be >= 2".into()));
        }
        if self.arrival_rates.len() != self.n_cz {
            return Err(Error::Config(format!(
                "need one arrival rate per CZ: {} rates for {} CZs",
                self.arrival_rates.len(),
                self.n_cz
            )));
        }
        if self.arrival_rates.iter().any(|&r| r < 0.0) {
            return Err(Error::Config("arrival rates must be >= 0".into()));
        }
        if self.segment_length <= 0.0 {
            return Err(Error::Config("segment_length must be > 0".into()));
        }
        if self.safety_margin < 0.0 {
            return Err(Error::Config("safety_margin must be >= 0".into()));
        }
        if self.v_init <= 0.0 || self.v_init > self.limits.v_max {
            return Err(Error::Config(format!(
                "v_init must be in (0, v_max], got {}",
                self.v_init
            )));
        }
        Ok(())
    }

    pub fn beta(&self) -> f64 {
        beta_from_alpha(self.alpha, &self.limits)
    }

    /// Planner parameters assembled from the scenario fields.
    pub fn mpc_config(&self) -> MpcConfig {
        MpcConfig {
            horizon: self.horizon,
            td: self.td,
            lambda: self.lambda,
            gammas: self.gammas,
            clbf_n: self.clbf_n,
            p_default: self.p_default,
            beta: self.beta(),
            safety_margin: self.safety_margin,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: ScenarioConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, Error> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
