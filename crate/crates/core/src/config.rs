//! Run configuration shared by every CLI subcommand.
//!
//! One TOML file describes the plant, the data collection, the reference
//! model, the controller structure, the test scenario, the governor and the
//! sweep. Every section has defaults reproducing the DC motor case, so a file
//! only needs `schema_version` plus whatever differs.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::closed_loop::{ReferenceProfile, Scheduling};
use crate::inner_synth::ControllerStructure;
use crate::mpc::MpcConfig;
use crate::plant_lab::{DcMotorParams, ExcitationSpec, SwitchedRcPlant};
use crate::refmodel::LpvStateSpace;
use crate::signals::{SampledSignal, SignalError};
use crate::state_estimator::KalmanTuning;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid TOML: {0}")]
    Syntax(String),
    /// A value does not fit the schema; `path` names the offending field.
    #[error("config field `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("schema_version {found} is not supported (expected {SCHEMA_VERSION})")]
    Version { found: u32 },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub schema_version: u32,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub reference_model: ReferenceModelConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default = "MpcConfig::dc_motor")]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            plant: PlantConfig::default(),
            experiment: ExperimentConfig::default(),
            reference_model: ReferenceModelConfig::default(),
            controller: ControllerConfig::default(),
            scenario: ScenarioConfig::default(),
            mpc: MpcConfig::dc_motor(),
            estimator: EstimatorConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    #[default]
    DcMotor,
    SwitchedRc,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    pub kind: PlantKind,
    pub dc_motor: DcMotorParams,
    pub switched_rc: SwitchedRcPlant,
    /// `(theta, omega, current)` for the motor, the output voltage for the
    /// RC circuit. Empty means at rest.
    pub initial_state: Vec<f64>,
}

/// Open-loop data collection. The first `train` samples form the training
/// and instrument logs, the rest the validation log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub sample_period: f64,
    pub samples: usize,
    pub train: usize,
    pub excitation: ExcitationSpec,
    /// Switch signal for the RC circuit.
    pub switch: ExcitationSpec,
    /// Output SNR for the motor; absent means noiseless.
    pub snr_db: Option<f64>,
    /// Measurement noise for the RC circuit.
    pub noise_std: f64,
    pub noise_seed: u64,
    pub instrument_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            sample_period: 0.01,
            samples: 2000,
            train: 1500,
            excitation: ExcitationSpec::filtered_gaussian(16.0, 1.6, 1),
            switch: ExcitationSpec::telegraph(100, 2),
            snr_db: Some(43.0),
            noise_std: 0.01,
            noise_seed: 10,
            instrument_seed: 20,
        }
    }
}

impl ExperimentConfig {
    /// Re-seeds every random source from one seed.
    pub fn reseed(&mut self, seed: u64) {
        self.excitation.seed = seed;
        self.noise_seed = seed.wrapping_add(1);
        self.instrument_seed = seed.wrapping_add(2);
        self.switch.seed = seed.wrapping_add(3);
    }
}

/// Either a unit-gain first-order pole or a full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceModelConfig {
    pub pole: f64,
    pub model: Option<LpvStateSpace>,
}

impl Default for ReferenceModelConfig {
    fn default() -> Self {
        Self { pole: 0.99, model: None }
    }
}

impl ReferenceModelConfig {
    pub fn resolve(&self) -> LpvStateSpace {
        self.model
            .clone()
            .unwrap_or_else(|| LpvStateSpace::unit_gain_first_order(self.pole))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvGrid {
    pub gamma: Vec<f64>,
    /// Kernel widths; ignored for parametric coefficient models.
    #[serde(default)]
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub structure: ControllerStructure,
    /// Use the instrument log when one is given.
    pub instrumental: bool,
    /// Hyperparameter grid scored on the validation log.
    pub cv: Option<CvGrid>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            structure: ControllerStructure::dc_motor_default(),
            instrumental: true,
            cv: None,
        }
    }
}

/// Closed-loop test: reference, optional switch schedule, output noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub sample_period: f64,
    pub reference: ReferenceProfile,
    /// Exogenous scheduling profile. Absent means `p = y`.
    pub scheduling: Option<ReferenceProfile>,
    pub noise_std: f64,
    pub noise_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            sample_period: 0.01,
            reference: dc_motor_reference(),
            scheduling: None,
            noise_std: 0.0,
            noise_seed: 30,
        }
    }
}

/// Piecewise-constant angle reference for the motor (a reconstruction of the
/// shape shown for the inner-loop test, not its exact values).
pub fn dc_motor_reference() -> ReferenceProfile {
    ReferenceProfile {
        duration_s: 40.0,
        steps: vec![(0.0, 0.0), (1.0, 1.0), (11.0, 0.5), (21.0, -0.5), (31.0, 0.0)],
    }
}

impl ScenarioConfig {
    pub fn reference_signal(&self) -> Result<SampledSignal, SignalError> {
        self.reference.sample(self.sample_period)
    }

    pub fn scheduling(&self) -> Result<Scheduling, SignalError> {
        Ok(match &self.scheduling {
            Some(s) => {
                let mut profile = s.clone();
                profile.duration_s = self.reference.duration_s;
                Scheduling::Exogenous(profile.sample(self.sample_period)?)
            }
            None => Scheduling::MeasuredOutput,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    #[default]
    Kalman,
    Direct,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub tuning: KalmanTuning,
    /// Direct mode only: read `x_M` from the measured output.
    pub x_m_from_output: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub poles: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            poles: DC_MOTOR_SWEEP_POLES.to_vec(),
        }
    }
}

/// Poles whose bandwidths stand in the ratios 1:3:6:10:20 with 0.99 at the
/// third position, mirroring the five reference models of the motor sweep.
pub const DC_MOTOR_SWEEP_POLES: [f64; 5] = [0.998_326, 0.994_987, 0.99, 0.983_389, 0.967_054];

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let cfg: Config = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Field {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Version {
                found: cfg.schema_version,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let e = &self.experiment;
        if !(e.sample_period > 0.0) || !(self.scenario.sample_period > 0.0) {
            return bad("sample periods must be > 0".into());
        }
        if e.train == 0 || e.train > e.samples {
            return bad(format!("experiment.train must be in 1..={}, got {}", e.samples, e.train));
        }
        match self.plant.kind {
            PlantKind::DcMotor if !matches!(self.plant.initial_state.len(), 0 | 3) => {
                return bad("plant.initial_state needs 3 entries for the motor".into());
            }
            PlantKind::SwitchedRc if !matches!(self.plant.initial_state.len(), 0 | 1) => {
                return bad("plant.initial_state needs 1 entry for the RC circuit".into());
            }
            _ => {}
        }
        self.controller
            .structure
            .validate()
            .map_err(|err| ConfigError::Invalid(format!("controller.structure: {err}")))?;
        self.mpc
            .validate()
            .map_err(|err| ConfigError::Invalid(format!("mpc: {err}")))?;
        if self.sweep.poles.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return bad("sweep.poles must lie in (0, 1)".into());
        }
        Ok(())
    }
}
