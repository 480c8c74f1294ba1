//! Simulated plants and excitation signals.
//!
//! These stand in for the unknown system: the design pipeline only ever sees
//! the logs they produce.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::{ExperimentLog, SampledSignal, SignalError};

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("plant state became non-finite at sample {index}")]
    Divergence { index: usize },
    #[error("invalid plant parameter: {0}")]
    Parameter(String),
    #[error("invalid excitation: {0}")]
    Excitation(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// A plant that can be stepped one controller sample at a time.
pub trait Plant {
    /// Noise-free output at the current sample.
    fn output(&self) -> f64;

    /// Holds `u` for one sample of length `dt`. `p` is the scheduling value
    /// active during the sample (ignored by plants that schedule on their own
    /// output).
    fn advance(&mut self, u: f64, p: f64, dt: f64) -> Result<(), PlantError>;
}

/// Physical constants of the DC motor with an unbalanced mass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcMotorParams {
    /// Armature resistance [Ohm].
    pub resistance: f64,
    /// Armature inductance [H].
    pub inductance: f64,
    /// Torque constant [Nm/A].
    pub torque_constant: f64,
    /// Disk inertia.
    pub inertia: f64,
    /// Viscous friction [Nms/rad].
    pub friction: f64,
    /// Added mass [kg].
    pub mass: f64,
    /// Distance of the added mass from the axis [m].
    pub mass_distance: f64,
    pub gravity: f64,
}

impl Default for DcMotorParams {
    fn default() -> Self {
        Self {
            resistance: 9.5,
            inductance: 0.84e-3,
            torque_constant: 53.6e-3,
            inertia: 2.2e-4,
            friction: 6.6e-5,
            mass: 0.07,
            mass_distance: 0.042,
            gravity: 9.81,
        }
    }
}

impl DcMotorParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let fields = [
            ("resistance", self.resistance),
            ("inductance", self.inductance),
            ("torque_constant", self.torque_constant),
            ("inertia", self.inertia),
            ("friction", self.friction),
            ("mass", self.mass),
            ("mass_distance", self.mass_distance),
            ("gravity", self.gravity),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(PlantError::Parameter(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// sin(x)/x with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// DC motor state `(theta, omega, current)` integrated with fixed-step RK4
/// under a zero-order-held voltage.
#[derive(Clone, Debug, PartialEq)]
pub struct DcMotorPlant {
    pub params: DcMotorParams,
    pub state: [f64; 3],
    /// RK4 steps per controller sample.
    pub substeps: usize,
}

/// RK4 steps per sample. The electrical pole -R/L is about -1.1e4 rad/s, so
/// at T_s = 10 ms the step must stay below roughly T_s/41 for RK4 to be
/// stable on it.
pub const DEFAULT_SUBSTEPS: usize = 100;

impl DcMotorPlant {
    pub fn new(params: DcMotorParams) -> Result<Self, PlantError> {
        params.validate()?;
        Ok(Self {
            params,
            state: [0.0; 3],
            substeps: DEFAULT_SUBSTEPS,
        })
    }

    pub fn with_state(mut self, state: [f64; 3]) -> Self {
        self.state = state;
        self
    }

    /// Continuous-time vector field for voltage `v`.
    pub fn derivative(&self, x: &[f64; 3], v: f64) -> [f64; 3] {
        let DcMotorParams {
            resistance: r,
            inductance: l,
            torque_constant: k,
            inertia: j,
            friction: b,
            mass: m,
            mass_distance: d,
            gravity: g,
        } = self.params;
        let [theta, omega, current] = *x;
        let s = sinc(theta);
        [
            (1.0 + s) * omega,
            m * g * d / j * s * theta - b / j * omega + k / j * current,
            -k / l * omega - r / l * current + v / l,
        ]
    }

    fn rk4(&self, x: &[f64; 3], v: f64, h: f64) -> [f64; 3] {
        let add = |a: &[f64; 3], b: &[f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
        let k1 = self.derivative(x, v);
        let k2 = self.derivative(&add(x, &k1, h / 2.0), v);
        let k3 = self.derivative(&add(x, &k2, h / 2.0), v);
        let k4 = self.derivative(&add(x, &k3, h), v);
        let mut out = *x;
        for i in 0..3 {
            out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out
    }
}

impl Plant for DcMotorPlant {
    fn output(&self) -> f64 {
        self.state[0]
    }

    fn advance(&mut self, u: f64, _p: f64, dt: f64) -> Result<(), PlantError> {
        let n = self.substeps.max(1);
        let h = dt / n as f64;
        for _ in 0..n {
            self.state = self.rk4(&self.state, u, h);
        }
        if self.state.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(PlantError::Divergence { index: 0 })
        }
    }
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Standard deviation of white noise giving the requested SNR against the
/// variance of the clean record. Infinite SNR (or a constant record) means no
/// noise.
pub fn noise_std_for_snr(clean: &[f64], snr_db: f64) -> f64 {
    if snr_db.is_infinite() && snr_db > 0.0 {
        return 0.0;
    }
    let var = variance(clean);
    if var == 0.0 {
        return 0.0;
    }
    (var / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Empirical SNR in dB of `noisy` against `clean`.
pub fn empirical_snr_db(clean: &[f64], noisy: &[f64]) -> f64 {
    let noise: Vec<f64> = noisy.iter().zip(clean).map(|(a, b)| a - b).collect();
    10.0 * (variance(clean) / variance(&noise)).log10()
}

fn add_noise(clean: &[f64], std: f64, seed: u64) -> Vec<f64> {
    if std == 0.0 {
        return clean.to_vec();
    }
    let dist = Normal::new(0.0, std).expect("finite std");
    let mut rng = noise_rng(seed);
    clean.iter().map(|y| y + dist.sample(&mut rng)).collect()
}

/// Noise-free angle trajectory sampled on the grid of `u`.
pub fn dc_motor_clean_output(plant: &DcMotorPlant, u: &SampledSignal) -> Result<Vec<f64>, PlantError> {
    let volts = u.dense()?;
    let dt = u.sample_period();
    let mut sim = plant.clone();
    let mut y = Vec::with_capacity(volts.len());
    for (k, &v) in volts.iter().enumerate() {
        let theta = sim.output();
        if !theta.is_finite() {
            return Err(PlantError::Divergence { index: k });
        }
        y.push(theta);
        sim.advance(v, 0.0, dt)
            .map_err(|_| PlantError::Divergence { index: k + 1 })?;
    }
    Ok(y)
}

/// Open-loop DC motor experiment. The angle is sampled before each held input
/// sample, corrupted with white noise at `snr_db`, and the noisy angle doubles
/// as the scheduling channel.
pub fn simulate_dc_motor(
    plant: &DcMotorPlant,
    u: &SampledSignal,
    snr_db: f64,
    seed: u64,
) -> Result<ExperimentLog, PlantError> {
    let clean = dc_motor_clean_output(plant, u)?;
    let std = noise_std_for_snr(&clean, snr_db);
    let y = add_noise(&clean, std, seed);
    let ts = u.sample_period();
    let y_sig = SampledSignal::with_start(y.iter().copied().map(Some).collect(), ts, u.start_index())?;
    Ok(ExperimentLog::new(u.clone(), y_sig.clone(), y_sig)?)
}

/// Re-runs the same open-loop experiment with an independent noise
/// realization, giving the instrument log.
pub fn repeat_experiment(
    plant: &DcMotorPlant,
    u: &SampledSignal,
    snr_db: f64,
    seed2: u64,
) -> Result<ExperimentLog, PlantError> {
    simulate_dc_motor(plant, u, snr_db, seed2)
}

/// First-order discrete plant whose pole and gain switch with a Boolean
/// scheduling signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwitchedRcPlant {
    pub a_on: f64,
    pub b_on: f64,
    pub a_off: f64,
    pub b_off: f64,
    #[serde(skip)]
    pub state: f64,
}

impl Default for SwitchedRcPlant {
    fn default() -> Self {
        Self {
            a_on: 0.80,
            b_on: 0.20,
            a_off: 0.95,
            b_off: 0.05,
            state: 0.0,
        }
    }
}

impl SwitchedRcPlant {
    pub fn validate(&self) -> Result<(), PlantError> {
        for (name, a) in [("a_on", self.a_on), ("a_off", self.a_off)] {
            if !(a > 0.0 && a < 1.0) {
                return Err(PlantError::Parameter(format!("{name} must lie in (0, 1), got {a}")));
            }
        }
        Ok(())
    }

    fn coefficients(&self, s: f64) -> (f64, f64) {
        if s >= 0.5 {
            (self.a_on, self.b_on)
        } else {
            (self.a_off, self.b_off)
        }
    }
}

impl Plant for SwitchedRcPlant {
    fn output(&self) -> f64 {
        self.state
    }

    fn advance(&mut self, u: f64, p: f64, _dt: f64) -> Result<(), PlantError> {
        let (a, b) = self.coefficients(p);
        self.state = a * self.state + b * u;
        if self.state.is_finite() {
            Ok(())
        } else {
            Err(PlantError::Divergence { index: 0 })
        }
    }
}

/// Open-loop run of the switched plant; the switch signal is the scheduling
/// channel.
pub fn simulate_switched_rc(
    plant: &SwitchedRcPlant,
    u: &SampledSignal,
    s: &SampledSignal,
    noise_std: f64,
    seed: u64,
) -> Result<ExperimentLog, PlantError> {
    plant.validate()?;
    let volts = u.dense()?;
    let switch = s.dense()?;
    if switch.len() != volts.len() {
        return Err(SignalError::Length {
            channel: "s",
            got: switch.len(),
            expected: volts.len(),
        }
        .into());
    }
    let mut sim = plant.clone();
    let mut clean = Vec::with_capacity(volts.len());
    for (k, (&v, &sw)) in volts.iter().zip(&switch).enumerate() {
        clean.push(sim.output());
        sim.advance(v, sw, u.sample_period())
            .map_err(|_| PlantError::Divergence { index: k + 1 })?;
    }
    let y = add_noise(&clean, noise_std, seed);
    let ts = u.sample_period();
    Ok(ExperimentLog::new(
        u.clone(),
        SampledSignal::with_start(y.into_iter().map(Some).collect(), ts, u.start_index())?,
        s.clone(),
    )?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExcitationKind {
    /// White Gaussian samples through a unity-gain one-pole low-pass.
    FilteredGaussian,
    /// Gaussian levels held for `hold_length` samples.
    PiecewiseConstant,
    /// 0/1 levels held for `hold_length` samples, each level drawn fairly.
    Telegraph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationSpec {
    pub kind: ExcitationKind,
    #[serde(default)]
    pub std: f64,
    #[serde(default)]
    pub mean: f64,
    #[serde(default = "default_cutoff")]
    pub filter_cutoff_hz: f64,
    #[serde(default = "default_hold")]
    pub hold_length: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_cutoff() -> f64 {
    1.6
}

fn default_hold() -> usize {
    50
}

impl ExcitationSpec {
    /// Filtered white noise with the given std (before filtering) and cutoff.
    pub fn filtered_gaussian(std: f64, cutoff_hz: f64, seed: u64) -> Self {
        Self {
            kind: ExcitationKind::FilteredGaussian,
            std,
            mean: 0.0,
            filter_cutoff_hz: cutoff_hz,
            hold_length: 1,
            seed,
        }
    }

    pub fn piecewise_constant(mean: f64, std: f64, hold_length: usize, seed: u64) -> Self {
        Self {
            kind: ExcitationKind::PiecewiseConstant,
            std,
            mean,
            filter_cutoff_hz: default_cutoff(),
            hold_length,
            seed,
        }
    }

    pub fn telegraph(hold_length: usize, seed: u64) -> Self {
        Self {
            kind: ExcitationKind::Telegraph,
            std: 0.0,
            mean: 0.0,
            filter_cutoff_hz: default_cutoff(),
            hold_length,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), PlantError> {
        if !(self.std >= 0.0 && self.std.is_finite()) {
            return Err(PlantError::Excitation(format!("std must be >= 0, got {}", self.std)));
        }
        if self.kind == ExcitationKind::FilteredGaussian && !(self.filter_cutoff_hz > 0.0) {
            return Err(PlantError::Excitation(format!(
                "filter_cutoff_hz must be > 0, got {}",
                self.filter_cutoff_hz
            )));
        }
        if self.kind != ExcitationKind::FilteredGaussian && self.hold_length == 0 {
            return Err(PlantError::Excitation("hold_length must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pole of the unity-DC-gain one-pole low-pass with the given cutoff.
pub fn lowpass_pole(cutoff_hz: f64, period: f64) -> f64 {
    (-2.0 * std::f64::consts::PI * cutoff_hz * period).exp()
}

/// The white samples that feed the filtered-Gaussian excitation, before
/// filtering. Exposed so the pre-filter statistics can be checked.
pub fn excitation_white_noise(spec: &ExcitationSpec, n: usize) -> Vec<f64> {
    if spec.std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, spec.std).expect("validated std");
    let mut rng = noise_rng(spec.seed);
    (0..n).map(|_| dist.sample(&mut rng)).collect()
}

pub fn generate_excitation(spec: &ExcitationSpec, n: usize, period: f64) -> Result<SampledSignal, PlantError> {
    spec.validate()?;
    if n == 0 {
        return Err(SignalError::Empty.into());
    }
    let values = match spec.kind {
        ExcitationKind::FilteredGaussian => {
            let a = lowpass_pole(spec.filter_cutoff_hz, period);
            let mut x = 0.0;
            excitation_white_noise(spec, n)
                .into_iter()
                .map(|w| {
                    x = a * x + (1.0 - a) * w;
                    spec.mean + x
                })
                .collect()
        }
        ExcitationKind::PiecewiseConstant => {
            let levels = excitation_white_noise(spec, n.div_ceil(spec.hold_length));
            (0..n).map(|k| spec.mean + levels[k / spec.hold_length]).collect()
        }
        ExcitationKind::Telegraph => {
            use rand::Rng;
            let mut rng = noise_rng(spec.seed);
            let levels: Vec<f64> = (0..n.div_ceil(spec.hold_length))
                .map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 })
                .collect();
            (0..n).map(|k| levels[k / spec.hold_length]).collect()
        }
    };
    Ok(SampledSignal::new(values, period)?)
}
