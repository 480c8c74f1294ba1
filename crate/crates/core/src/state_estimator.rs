//! Estimates of the augmented state for the governor.
//!
//! At time `t` the governor needs `xi(t)` before it picks `g(t)`, while the
//! measured `u(t)` only exists after `g(t)` reaches the inner controller. The
//! filter therefore corrects with `y(t)` first and with `u(t)` once it is
//! known. With diagonal `R` the two scalar corrections equal one joint
//! correction against `[y; u]`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::realization::{AugmentedModel, RealizationError};
use crate::refmodel::StateSpaceMatrices;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("innovation variance {value:.3e} is not positive on the {channel} channel")]
    Innovation { channel: &'static str, value: f64 },
    #[error("invalid tuning: {0}")]
    Tuning(String),
    #[error(transparent)]
    Realization(#[from] RealizationError),
}

/// Noise tuning. `r` holds the variances of the `y` and `u` measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanTuning {
    /// Process noise variance on every state entry.
    pub q: f64,
    pub r: [f64; 2],
    /// Initial covariance scale.
    pub p0: f64,
}

impl Default for KalmanTuning {
    fn default() -> Self {
        Self {
            q: 1e-6,
            r: [1e-4, 1e-6],
            p0: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KalmanFilter {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
}

/// Measurements at one instant. `g` is the reference the inner controller
/// used to produce `u`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Measurement {
    pub y: f64,
    pub u: f64,
    pub g: f64,
}

impl KalmanFilter {
    pub fn new(n: usize, tuning: &KalmanTuning) -> Result<Self, EstimatorError> {
        if !(tuning.q >= 0.0) || !(tuning.p0 >= 0.0) || tuning.r.iter().any(|&r| !(r > 0.0)) {
            return Err(EstimatorError::Tuning(format!("need q >= 0, p0 >= 0 and r > 0, got {tuning:?}")));
        }
        Ok(Self {
            q: DMatrix::identity(n, n) * tuning.q,
            r: DMatrix::from_diagonal(&DVector::from_row_slice(&tuning.r)),
            x: DVector::zeros(n),
            p: DMatrix::identity(n, n) * tuning.p0,
        })
    }

    pub fn with_state(mut self, x: DVector<f64>) -> Self {
        self.x = x;
        self
    }

    /// Time update with the reference applied over the last sample.
    pub fn predict(&mut self, m: &StateSpaceMatrices, g: f64) {
        self.x = &m.a * &self.x + &m.b * g;
        self.p = &m.a * &self.p * m.a.transpose() + &self.q;
        symmetrize(&mut self.p);
    }

    fn correct_row(&mut self, c: DVector<f64>, predicted: f64, measured: f64, r: f64, channel: &'static str) -> Result<(), EstimatorError> {
        let pc = &self.p * &c;
        let s = c.dot(&pc) + r;
        if !(s > 0.0 && s.is_finite()) {
            return Err(EstimatorError::Innovation { channel, value: s });
        }
        let k = pc / s;
        self.x += &k * (measured - predicted);
        // Joseph form
        let n = self.x.len();
        let i_kc = DMatrix::identity(n, n) - &k * c.transpose();
        self.p = &i_kc * &self.p * i_kc.transpose() + &k * k.transpose() * r;
        symmetrize(&mut self.p);
        Ok(())
    }

    /// Correction with the measured output.
    pub fn correct_output(&mut self, m: &StateSpaceMatrices, y: f64) -> Result<(), EstimatorError> {
        let c = m.c.row(0).transpose();
        let pred = c.dot(&self.x);
        self.correct_row(c, pred, y, self.r[(0, 0)], "y")
    }

    /// Correction with the measured input produced under reference `g`.
    pub fn correct_input(&mut self, m: &StateSpaceMatrices, u: f64, g: f64) -> Result<(), EstimatorError> {
        let c = m.c.row(1).transpose();
        let pred = c.dot(&self.x) + m.d[(1, 0)] * g;
        self.correct_row(c, pred, u, self.r[(1, 1)], "u")
    }

    /// Smallest eigenvalue of the covariance.
    pub fn min_covariance_eigenvalue(&self) -> f64 {
        if self.p.nrows() == 0 {
            return 0.0;
        }
        SymmetricEigen::new(self.p.clone()).eigenvalues.min()
    }
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let t = p.transpose();
    *p = (&*p + t) * 0.5;
}

/// One full filter step: predict with `g_applied` over the previous sample
/// (matrices at `p_prev`), then correct with `[y; u]` at `p_now`.
pub fn kf_step(
    filter: &mut KalmanFilter,
    model: &AugmentedModel,
    g_applied: f64,
    measured: &Measurement,
    p_prev: &[f64],
    p_now: &[f64],
) -> Result<(), EstimatorError> {
    let prev = model.evaluate_at(p_prev)?;
    let now = model.evaluate_at(p_now)?;
    filter.predict(&prev, g_applied);
    filter.correct_output(&now, measured.y)?;
    filter.correct_input(&now, measured.u, measured.g)?;
    Ok(())
}

/// Exact shift-register reconstruction from measured histories.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectState {
    x_m: DVector<f64>,
    u_past: Vec<f64>,
    e_past: Vec<f64>,
    e_int: f64,
    /// Set `x_M` from the measured output instead of running the reference
    /// model open loop (requires a single-state model with `C != 0`).
    pub x_m_from_output: bool,
}

impl DirectState {
    pub fn new(model: &AugmentedModel, x_m_from_output: bool) -> Result<Self, EstimatorError> {
        let l = model.layout();
        if x_m_from_output && l.x_m.len() != 1 {
            return Err(EstimatorError::Tuning(
                "reading x_M from the output needs a single-state reference model".into(),
            ));
        }
        Ok(Self {
            x_m: DVector::zeros(l.x_m.len()),
            u_past: vec![0.0; l.u_past.len()],
            e_past: vec![0.0; l.e_past.len()],
            e_int: 0.0,
            x_m_from_output,
        })
    }
}

/// Where the governor's state comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum StateSource {
    Kalman {
        filter: KalmanFilter,
        last: Option<(f64, Vec<f64>)>,
    },
    Direct(DirectState),
}

impl StateSource {
    pub fn kalman(model: &AugmentedModel, tuning: &KalmanTuning) -> Result<Self, EstimatorError> {
        Ok(StateSource::Kalman {
            filter: KalmanFilter::new(model.state_dim(), tuning)?,
            last: None,
        })
    }

    pub fn direct(model: &AugmentedModel, x_m_from_output: bool) -> Result<Self, EstimatorError> {
        Ok(StateSource::Direct(DirectState::new(model, x_m_from_output)?))
    }

    /// State estimate at time `t` from the output measured at `t`.
    pub fn estimate(&mut self, model: &AugmentedModel, y: f64, p_now: &[f64]) -> Result<DVector<f64>, EstimatorError> {
        match self {
            StateSource::Kalman { filter, last } => {
                if let Some((g, p_prev)) = last.as_ref() {
                    filter.predict(&model.evaluate_at(p_prev)?, *g);
                }
                filter.correct_output(&model.evaluate_at(p_now)?, y)?;
                Ok(filter.x.clone())
            }
            StateSource::Direct(d) => {
                if d.x_m_from_output {
                    let c = model.reference().evaluate(p_now[0]).c[(0, 0)];
                    if c != 0.0 {
                        d.x_m[0] = y / c;
                    }
                }
                Ok(model.compose_state(&d.x_m, &d.u_past, &d.e_past, d.e_int)?)
            }
        }
    }

    /// Records what happened at time `t` once `g(t)` and `u(t)` are known.
    pub fn record(&mut self, model: &AugmentedModel, m: &Measurement, p_now: &[f64]) -> Result<(), EstimatorError> {
        match self {
            StateSource::Kalman { filter, last } => {
                filter.correct_input(&model.evaluate_at(p_now)?, m.u, m.g)?;
                *last = Some((m.g, p_now.to_vec()));
            }
            StateSource::Direct(d) => {
                let mats = model.reference().evaluate(p_now[0]);
                let e = m.g - m.y;
                shift_in(&mut d.u_past, m.u);
                shift_in(&mut d.e_past, e);
                d.e_int += e;
                if !d.x_m_from_output {
                    d.x_m = &mats.a * &d.x_m + &mats.b * m.g;
                }
            }
        }
        Ok(())
    }
}

fn shift_in(buf: &mut [f64], x: f64) {
    if buf.is_empty() {
        return;
    }
    buf.rotate_right(1);
    buf[0] = x;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuning_validation() {
        let bad = KalmanTuning {
            r: [0.0, 1.0],
            ..KalmanTuning::default()
        };
        assert!(KalmanFilter::new(3, &bad).is_err());
        assert!(KalmanFilter::new(3, &KalmanTuning::default()).is_ok());
    }

    #[test]
    fn scalar_update_matches_textbook() {
        let mut f = KalmanFilter::new(
            1,
            &KalmanTuning {
                q: 0.0,
                r: [1.0, 1.0],
                p0: 1.0,
            },
        )
        .unwrap();
        let m = StateSpaceMatrices {
            a: DMatrix::from_element(1, 1, 1.0),
            b: DMatrix::zeros(1, 1),
            c: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            d: DMatrix::zeros(2, 1),
        };
        f.correct_output(&m, 2.0).unwrap();
        // gain 1/2, posterior variance 1/2
        assert!((f.x[0] - 1.0).abs() < 1e-15);
        assert!((f.p[(0, 0)] - 0.5).abs() < 1e-15);
    }
}
