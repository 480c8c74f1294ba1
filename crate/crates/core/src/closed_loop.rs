//! Closed-loop runs: inner loop alone, and inner loop under the governor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inner_synth::{identify, ControllerStructure, InnerControllerModel, InnerError};
use crate::metrics::{matching_ms, MetricsError};
use crate::mpc::{MpcConfig, MpcController, MpcError, StepDiagnostics};
use crate::plant_lab::{Plant, PlantError};
use crate::realization::AugmentedModel;
use crate::refmodel::{cutoff_hz, simulate, LpvStateSpace, ModelError};
use crate::signals::{write_columns, ExperimentLog, SampledSignal, SignalError};
use crate::state_estimator::{EstimatorError, Measurement, StateSource};

/// Magnitude beyond which a run counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("closed loop diverged at sample {index}")]
    Divergence { index: usize, partial: Box<ClosedLoopLog> },
    #[error("scheduling record has {got} samples, run needs {expected}")]
    Scheduling { got: usize, expected: usize },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Inner(#[from] InnerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// What drives the scheduling variable.
#[derive(Clone, Debug, PartialEq)]
pub enum Scheduling {
    /// `p(t) = y(t)` as measured (quasi-LPV).
    MeasuredOutput,
    /// A known exogenous record (e.g. a switch signal).
    Exogenous(SampledSignal),
}

impl Scheduling {
    fn value(&self, t: usize, y: f64) -> f64 {
        match self {
            Scheduling::MeasuredOutput => y,
            Scheduling::Exogenous(s) => s.get(t).unwrap_or(0.0),
        }
    }

    fn future(&self, t: usize) -> Option<f64> {
        match self {
            Scheduling::MeasuredOutput => None,
            Scheduling::Exogenous(s) => Some(s.get(t.min(s.len().saturating_sub(1))).unwrap_or(0.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopOptions {
    /// Standard deviation of white noise added to the measured output.
    pub noise_std: f64,
    pub seed: u64,
}

/// Signals of one closed-loop run.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopLog {
    pub log: ExperimentLog,
    pub g: SampledSignal,
    pub r: Option<SampledSignal>,
}

impl ClosedLoopLog {
    /// `t,u,y,p,g[,r][,yd]` CSV.
    pub fn write_csv<W: std::io::Write>(&self, out: W, y_d: Option<&SampledSignal>) -> Result<(), SignalError> {
        let mut cols: Vec<(&str, &SampledSignal)> =
            vec![("u", &self.log.u), ("y", &self.log.y), ("p", &self.log.p), ("g", &self.g)];
        if let Some(r) = &self.r {
            cols.push(("r", r));
        }
        if let Some(yd) = y_d {
            cols.push(("yd", yd));
        }
        write_columns(out, &self.log.u, &cols)
    }
}

struct Recorder {
    u: Vec<Option<f64>>,
    y: Vec<Option<f64>>,
    p: Vec<Option<f64>>,
    g: Vec<Option<f64>>,
    ts: f64,
    start: i64,
}

impl Recorder {
    fn new(n: usize, ts: f64, start: i64) -> Self {
        Self {
            u: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            p: Vec::with_capacity(n),
            g: Vec::with_capacity(n),
            ts,
            start,
        }
    }

    fn push(&mut self, u: f64, y: f64, p: f64, g: f64) {
        self.u.push(Some(u));
        self.y.push(Some(y));
        self.p.push(Some(p));
        self.g.push(Some(g));
    }

    fn finish(self, r: Option<SampledSignal>) -> Result<ClosedLoopLog, SignalError> {
        let mk = |v: Vec<Option<f64>>| SampledSignal::with_start(v, self.ts, self.start);
        let r = match r {
            Some(r) => Some(r.slice(0, self.u.len().max(1).min(r.len()))?),
            None => None,
        };
        Ok(ClosedLoopLog {
            log: ExperimentLog::new(mk(self.u.clone())?, mk(self.y.clone())?, mk(self.p.clone())?)?,
            g: mk(self.g)?,
            r,
        })
    }
}

fn diverged(v: f64) -> bool {
    !v.is_finite() || v.abs() > DIVERGENCE_LIMIT
}

struct NoiseSource {
    rng: ChaCha8Rng,
    dist: Option<Normal<f64>>,
}

impl NoiseSource {
    fn new(opts: &LoopOptions) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            dist: (opts.noise_std > 0.0).then(|| Normal::new(0.0, opts.noise_std).expect("finite std")),
        }
    }

    fn sample(&mut self) -> f64 {
        self.dist.as_ref().map_or(0.0, |d| d.sample(&mut self.rng))
    }
}

/// How the reference reaching the inner loop is chosen.
pub enum Governor<'a> {
    /// `g(t) = r(t)`.
    PassThrough,
    Mpc {
        model: &'a AugmentedModel,
        config: &'a MpcConfig,
        source: StateSource,
    },
}

fn check_schedule(s: &Scheduling, n: usize) -> Result<(), LoopError> {
    if let Scheduling::Exogenous(sig) = s {
        if sig.len() < n {
            return Err(LoopError::Scheduling {
                got: sig.len(),
                expected: n,
            });
        }
    }
    Ok(())
}

/// Inner loop driven directly by `g`.
pub fn run_inner_loop<P: Plant>(
    plant: &mut P,
    ctrl: &InnerControllerModel,
    g: &SampledSignal,
    scheduling: &Scheduling,
    opts: &LoopOptions,
) -> Result<ClosedLoopLog, LoopError> {
    let (log, _) = run_hierarchical(plant, ctrl, Governor::PassThrough, g, scheduling, opts)?;
    Ok(log)
}

/// Inner loop under a governor. Each sample: measure `y`, pick `g(t)`, run
/// the inner controller, hold its `u` on the plant for one period.
pub fn run_hierarchical<P: Plant>(
    plant: &mut P,
    ctrl: &InnerControllerModel,
    mut governor: Governor<'_>,
    r: &SampledSignal,
    scheduling: &Scheduling,
    opts: &LoopOptions,
) -> Result<(ClosedLoopLog, Vec<StepDiagnostics>), LoopError> {
    let n = r.len();
    check_schedule(scheduling, n)?;
    let rv = r.dense()?;
    let ts = r.sample_period();
    let mut noise = NoiseSource::new(opts);
    let mut hist = ctrl.initial_history();
    let mut rec = Recorder::new(n, ts, r.start_index());
    let mut diags = Vec::new();
    let max_lag = ctrl.structure.max_scheduling_lag();
    let mut p_past: Vec<f64> = Vec::new();
    let mut u_prev = 0.0;
    let mut mpc = match &governor {
        Governor::Mpc { model, config, .. } => Some(MpcController::new(*model, (*config).clone())?),
        Governor::PassThrough => None,
    };
    let r_for_log = matches!(governor, Governor::Mpc { .. }).then(|| r.clone());

    for t in 0..n {
        let y = plant.output() + noise.sample();
        let p = scheduling.value(t, y);
        let p_vec: Vec<f64> = std::iter::once(p)
            .chain((0..max_lag).map(|l| p_past.get(l).copied().unwrap_or(0.0)))
            .collect();
        let g = match (&mut governor, mpc.as_mut()) {
            (Governor::Mpc { model, config, source }, Some(mpc)) => {
                let xi = source.estimate(model, y, &p_vec)?;
                let r_future: Vec<f64> = (0..=config.np).map(|k| rv[(t + k).min(n - 1)]).collect();
                let p_future = future_p_vectors(scheduling, t, config.np, &p_vec, &p_past, max_lag);
                let (g, d) = mpc.step(&xi, &r_future, &p_future, u_prev, None)?;
                diags.push(d);
                g
            }
            _ => rv[t],
        };
        let u = ctrl.controller_step(&mut hist, g, y, p);
        if let Governor::Mpc { model, source, .. } = &mut governor {
            source.record(model, &Measurement { y, u, g }, &p_vec)?;
        }
        rec.push(u, y, p, g);
        if diverged(y) || diverged(u) {
            return Err(LoopError::Divergence {
                index: t,
                partial: Box::new(rec.finish(r_for_log)?),
            });
        }
        if plant.advance(u, p, ts).is_err() {
            return Err(LoopError::Divergence {
                index: t,
                partial: Box::new(rec.finish(r_for_log)?),
            });
        }
        p_past.insert(0, p);
        p_past.truncate(max_lag);
        u_prev = u;
    }
    Ok((rec.finish(r_for_log)?, diags))
}

/// Scheduling vectors for `t..t+np`. Only exogenous schedules have a known
/// future; otherwise the current vector is repeated.
fn future_p_vectors(
    scheduling: &Scheduling,
    t: usize,
    np: usize,
    p_now: &[f64],
    p_past: &[f64],
    max_lag: usize,
) -> Vec<Vec<f64>> {
    if matches!(scheduling, Scheduling::MeasuredOutput) {
        return vec![p_now.to_vec()];
    }
    (0..=np)
        .map(|k| {
            (0..=max_lag)
                .map(|l| {
                    if l <= k {
                        scheduling.future(t + k - l).unwrap_or(0.0)
                    } else {
                        p_past.get(l - k - 1).copied().unwrap_or(0.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Open-loop response of the reference model to `g` (the desired output).
pub fn desired_output(reference: &LpvStateSpace, g: &SampledSignal, p: &SampledSignal) -> Result<SampledSignal, LoopError> {
    let (y, _) = simulate(reference, g, p, &nalgebra::DVector::zeros(reference.n_x()))?;
    Ok(y)
}

/// Data and test reference shared by all entries of a sensitivity sweep.
#[derive(Clone, Debug)]
pub struct SweepScenario {
    pub train: ExperimentLog,
    pub instrument: Option<ExperimentLog>,
    pub g: SampledSignal,
    pub scheduling: Scheduling,
    pub options: LoopOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub pole: f64,
    pub cutoff_hz: f64,
    /// Mean square of `y - y_d`; `None` when the loop diverged.
    pub ms: Option<f64>,
    pub unstable: bool,
}

/// For every pole: fit the controller for the unit-gain first-order model
/// with that pole, run the inner loop on the scenario, and record the
/// matching error or divergence. Entries run in parallel.
pub fn sensitivity_sweep<P: Plant + Clone + Sync>(
    plant: &P,
    structure: &ControllerStructure,
    poles: &[f64],
    scenario: &SweepScenario,
) -> Result<Vec<SweepRow>, LoopError> {
    poles
        .par_iter()
        .map(|&pole| {
            let m = LpvStateSpace::unit_gain_first_order(pole);
            let (ctrl, _) = identify(&scenario.train, scenario.instrument.as_ref(), structure, &m)?;
            let mut pl = plant.clone();
            let cutoff = cutoff_hz(pole, scenario.g.sample_period());
            match run_inner_loop(&mut pl, &ctrl, &scenario.g, &scenario.scheduling, &scenario.options) {
                Ok(run) => {
                    let yd = desired_output(&m, &scenario.g, &run.log.p)?;
                    Ok(SweepRow {
                        pole,
                        cutoff_hz: cutoff,
                        ms: Some(matching_ms(&run.log.y, &yd)?),
                        unstable: false,
                    })
                }
                Err(LoopError::Divergence { .. }) => Ok(SweepRow {
                    pole,
                    cutoff_hz: cutoff,
                    ms: None,
                    unstable: true,
                }),
                Err(e) => Err(e),
            }
        })
        .collect()
}

/// Piecewise-constant reference: `(start_time_s, value)` pairs held until the
/// next start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceProfile {
    #[serde(default)]
    pub duration_s: f64,
    pub steps: Vec<(f64, f64)>,
}

impl ReferenceProfile {
    pub fn sample(&self, period: f64) -> Result<SampledSignal, SignalError> {
        let n = (self.duration_s / period).round() as usize;
        let mut steps = self.steps.clone();
        steps.sort_by(|a, b| a.0.total_cmp(&b.0));
        let vals = (0..n)
            .map(|k| {
                let t = k as f64 * period + 1e-9;
                steps.iter().rev().find(|(s, _)| *s <= t).map_or(0.0, |(_, v)| *v)
            })
            .collect();
        SampledSignal::new(vals, period)
    }
}
