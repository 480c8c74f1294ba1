//! Reference governor: a condensed tracking MPC over the augmented model.
//!
//! Decision vector `z = [g_1 .. g_Nu, eps]`. Move `g_k` is applied at time
//! `t+k-1` and held for `k > Nu`. Predictions over `k = 1..Np` are
//! `y_k = y(t+k)`, `u_k = u(t+k-1)`, `du_k = u_k - u_{k-1}` with
//! `u_0 = u(t-1)`. Output and `g` are compared with `r(t+k)`. All bounds are
//! softened by the single slack `eps >= 0` through per-family gains.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::qp::{solve_with, QpError, QpOptions, QpProblem, QpStatus};
use crate::realization::{AugmentedModel, RealizationError};
use crate::refmodel::StateSpaceMatrices;
use crate::signals::BoundSet;

#[derive(Debug, Error)]
pub enum MpcError {
    #[error("invalid MPC configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("QP returned {status:?} after {iterations} iterations")]
    Solver {
        status: QpStatus,
        iterations: usize,
        /// `block,row,col,value` dump of the failing problem.
        dump: String,
    },
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error(transparent)]
    Realization(#[from] RealizationError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// Future scheduling values are known and used along the horizon.
    #[default]
    Ltv,
    /// Scheduling is frozen at its current value over the horizon.
    Lpv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub np: usize,
    pub nu: usize,
    pub q_y: f64,
    pub q_u: f64,
    pub q_du: f64,
    pub q_g: f64,
    pub q_eps: f64,
    pub v_y: f64,
    pub v_u: f64,
    pub v_du: f64,
    pub bounds: BoundSet,
    pub mode: PredictionMode,
    /// Number of reference samples beyond `r(t)` visible to the governor; the
    /// last visible value is held beyond it. `None` means the whole horizon.
    pub preview: Option<usize>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            np: 10,
            nu: 10,
            q_y: 1.0,
            q_u: 0.0,
            q_du: 0.0,
            q_g: 1.0,
            q_eps: 1e5,
            v_y: 1.0,
            v_u: 1.0,
            v_du: 1.0,
            bounds: BoundSet::unbounded(),
            mode: PredictionMode::Ltv,
            preview: None,
        }
    }
}

impl MpcConfig {
    /// Tuning used on the DC motor with the 0.2 V rate limit.
    pub fn dc_motor() -> Self {
        Self {
            np: 10,
            nu: 10,
            q_y: 6.5,
            q_u: 0.0,
            q_du: 0.1,
            q_g: 1.0,
            bounds: BoundSet {
                du_min: -0.2,
                du_max: 0.2,
                ..BoundSet::unbounded()
            },
            ..Self::default()
        }
    }

    /// Tuning used on the switched RC circuit with 0..5 V limits.
    pub fn switched_rc() -> Self {
        Self {
            np: 3,
            nu: 3,
            q_y: 0.45,
            q_u: 0.0,
            q_du: 0.0,
            q_g: 0.1,
            bounds: BoundSet {
                u_min: 0.0,
                u_max: 5.0,
                y_min: 0.0,
                y_max: 5.0,
                ..BoundSet::unbounded()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), MpcError> {
        if self.nu == 0 || self.nu > self.np {
            return Err(MpcError::Config(format!("need 1 <= nu <= np, got nu = {}, np = {}", self.nu, self.np)));
        }
        for (name, w) in [("q_y", self.q_y), ("q_u", self.q_u), ("q_du", self.q_du), ("q_g", self.q_g)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(MpcError::Config(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        for (name, w) in [("q_eps", self.q_eps), ("v_y", self.v_y), ("v_u", self.v_u), ("v_du", self.v_du)] {
            if !(w > 0.0 && w.is_finite()) {
                return Err(MpcError::Config(format!("{name} must be finite and > 0, got {w}")));
            }
        }
        self.bounds
            .validate()
            .map_err(|e| MpcError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Source of frozen `[y; u]`-output matrices along the horizon.
pub trait PredictionModel {
    fn state_dim(&self) -> usize;
    fn matrices(&self, p_vector: &[f64]) -> Result<StateSpaceMatrices, MpcError>;
}

impl PredictionModel for AugmentedModel {
    fn state_dim(&self) -> usize {
        AugmentedModel::state_dim(self)
    }

    fn matrices(&self, p_vector: &[f64]) -> Result<StateSpaceMatrices, MpcError> {
        Ok(self.evaluate_at(p_vector)?)
    }
}

impl<T: PredictionModel + ?Sized> PredictionModel for &T {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }

    fn matrices(&self, p_vector: &[f64]) -> Result<StateSpaceMatrices, MpcError> {
        (**self).matrices(p_vector)
    }
}

/// A model with fixed matrices (output rows `[y; u]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FixedModel(pub StateSpaceMatrices);

impl PredictionModel for FixedModel {
    fn state_dim(&self) -> usize {
        self.0.a.nrows()
    }

    fn matrices(&self, _p_vector: &[f64]) -> Result<StateSpaceMatrices, MpcError> {
        Ok(self.0.clone())
    }
}

/// Stacked predictions `Y = y0 + Sy g`, `U = u0 + Su g` where `g` holds the
/// per-step moves (before blocking).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionStack {
    pub y_free: DVector<f64>,
    pub u_free: DVector<f64>,
    pub s_y: DMatrix<f64>,
    pub s_u: DMatrix<f64>,
    /// `Np x Nu` blocking map from decision moves to per-step moves.
    pub blocking: DMatrix<f64>,
}

/// Scheduling vectors used for steps `t..t+Np`. In LPV mode only the first
/// entry of `p_future` is read.
fn horizon_schedule<'a>(config: &MpcConfig, p_future: &'a [Vec<f64>]) -> Result<Vec<&'a [f64]>, MpcError> {
    let np = config.np;
    match config.mode {
        PredictionMode::Lpv => {
            let p0 = p_future
                .first()
                .ok_or_else(|| MpcError::Shape("p_future is empty".into()))?;
            Ok(vec![p0.as_slice(); np + 1])
        }
        PredictionMode::Ltv => {
            if p_future.is_empty() {
                return Err(MpcError::Shape("p_future is empty".into()));
            }
            // hold the last known value if the schedule is short
            Ok((0..=np).map(|k| p_future[k.min(p_future.len() - 1)].as_slice()).collect())
        }
    }
}

pub fn build_prediction<M: PredictionModel + ?Sized>(
    model: &M,
    config: &MpcConfig,
    xi: &DVector<f64>,
    p_future: &[Vec<f64>],
) -> Result<PredictionStack, MpcError> {
    config.validate()?;
    let n = model.state_dim();
    if xi.len() != n {
        return Err(MpcError::Shape(format!("state has {} entries, model has {n}", xi.len())));
    }
    let np = config.np;
    let sched = horizon_schedule(config, p_future)?;
    let mats: Vec<StateSpaceMatrices> = sched.iter().map(|p| model.matrices(p)).collect::<Result<_, _>>()?;
    // state k as  F_k xi + G_k g
    let mut f_k = DMatrix::<f64>::identity(n, n);
    let mut g_k = DMatrix::<f64>::zeros(n, np);
    let mut y_free = DVector::zeros(np);
    let mut u_free = DVector::zeros(np);
    let mut s_y = DMatrix::zeros(np, np);
    let mut s_u = DMatrix::zeros(np, np);
    for k in 0..np {
        let m = &mats[k];
        // u(t+k) from state k and move k
        let cu = m.c.row(1);
        u_free[k] = (cu * &f_k * xi)[0];
        let row = cu * &g_k;
        s_u.row_mut(k).copy_from(&row);
        s_u[(k, k)] += m.d[(1, 0)];
        // advance to state k+1
        f_k = &m.a * &f_k;
        g_k = &m.a * &g_k;
        g_k.column_mut(k).axpy(1.0, &m.b.column(0), 1.0);
        let cy = mats[k + 1].c.row(0);
        y_free[k] = (cy * &f_k * xi)[0];
        s_y.row_mut(k).copy_from(&(cy * &g_k));
    }
    let nu = config.nu;
    let blocking = DMatrix::from_fn(np, nu, |k, j| if k.min(nu - 1) == j { 1.0 } else { 0.0 });
    Ok(PredictionStack {
        y_free,
        u_free,
        s_y,
        s_u,
        blocking,
    })
}

/// Extends `r` to `len` samples, holding the last value; at most `visible`
/// samples of `r` are used.
fn hold_extend(r: &[f64], len: usize, visible: Option<usize>) -> Result<DVector<f64>, MpcError> {
    if r.is_empty() {
        return Err(MpcError::Shape("reference preview is empty".into()));
    }
    let visible = visible.map_or(r.len(), |p| p.min(r.len()).max(1));
    Ok(DVector::from_fn(len, |k, _| r[k.min(visible - 1)]))
}

/// Assembles the step QP. `r_future[k]` is `r(t+k)` for `k = 0..=Np` (held
/// at its last value when shorter). Outputs `y(t+k|t)` track `r(t+k)` for
/// `k >= 1`; the move applied at `t+j` tracks `r(t+j)`, so a dominant `q_g`
/// makes the governor transparent. `u_ref_future` defaults to zero.
#[allow(clippy::too_many_arguments)]
pub fn build_step_qp<M: PredictionModel + ?Sized>(
    model: &M,
    config: &MpcConfig,
    xi: &DVector<f64>,
    r_future: &[f64],
    p_future: &[Vec<f64>],
    u_prev: f64,
    u_ref_future: Option<&[f64]>,
) -> Result<QpProblem, MpcError> {
    let stack = build_prediction(model, config, xi, p_future)?;
    let np = config.np;
    let nu = config.nu;
    let r_all = hold_extend(r_future, np + 1, config.preview.map(|p| p + 1))?;
    let r = r_all.rows(1, np).into_owned();
    let r_g = r_all.rows(0, nu).into_owned();
    let u_ref = match u_ref_future {
        Some(u) => hold_extend(u, np, None)?,
        None => DVector::zeros(np),
    };
    let t = &stack.blocking;
    let sy = &stack.s_y * t;
    let su = &stack.s_u * t;
    let mut diff = DMatrix::<f64>::identity(np, np);
    for k in 1..np {
        diff[(k, k - 1)] = -1.0;
    }
    let sdu = &diff * &su;
    let mut du_free = &diff * &stack.u_free;
    du_free[0] -= u_prev;

    let y_err = &stack.y_free - &r;
    let u_err = &stack.u_free - &u_ref;
    let mut m = sy.transpose() * &sy * config.q_y
        + su.transpose() * &su * config.q_u
        + sdu.transpose() * &sdu * config.q_du
        + DMatrix::<f64>::identity(nu, nu) * config.q_g;
    m = (&m + m.transpose()) * 0.5;
    let c = sy.transpose() * &y_err * config.q_y
        + su.transpose() * &u_err * config.q_u
        + sdu.transpose() * &du_free * config.q_du
        - r_g * config.q_g;

    let nz = nu + 1;
    let mut h = DMatrix::zeros(nz, nz);
    h.view_mut((0, 0), (nu, nu)).copy_from(&(m * 2.0));
    h[(nu, nu)] = 2.0 * config.q_eps;
    let mut f = DVector::zeros(nz);
    f.rows_mut(0, nu).copy_from(&(c * 2.0));

    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    let b = &config.bounds;
    let mut family = |s: &DMatrix<f64>, free: &DVector<f64>, lo: f64, hi: f64, v: f64| {
        for k in 0..np {
            if hi.is_finite() {
                let mut a = DVector::zeros(nz);
                a.rows_mut(0, nu).copy_from(&s.row(k).transpose());
                a[nu] = -v;
                rows.push((a, hi - free[k]));
            }
            if lo.is_finite() {
                let mut a = DVector::zeros(nz);
                a.rows_mut(0, nu).copy_from(&(-s.row(k).transpose()));
                a[nu] = -v;
                rows.push((a, free[k] - lo));
            }
        }
    };
    family(&sy, &stack.y_free, b.y_min, b.y_max, config.v_y);
    family(&su, &stack.u_free, b.u_min, b.u_max, config.v_u);
    family(&sdu, &du_free, b.du_min, b.du_max, config.v_du);
    let mut eps_row = DVector::zeros(nz);
    eps_row[nu] = -1.0;
    rows.push((eps_row, 0.0));
    let a_in = DMatrix::from_fn(rows.len(), nz, |i, j| rows[i].0[j]);
    let b_in = DVector::from_fn(rows.len(), |i, _| rows[i].1);
    Ok(QpProblem {
        h,
        f,
        a_in,
        b_in,
        lb: None,
        ub: None,
    })
}

/// Per-step record written to the diagnostics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub g: f64,
    pub eps: f64,
    pub qp_iters: usize,
    pub qp_kkt: f64,
    pub active_set_size: usize,
    /// Predicted `u(t)` under the chosen move.
    pub u_pred: f64,
}

/// Receding-horizon governor holding its model, tuning and warm start.
#[derive(Clone, Debug)]
pub struct MpcController<M> {
    pub model: M,
    pub config: MpcConfig,
    pub qp_options: QpOptions,
    warm_start: Vec<usize>,
}

impl<M: PredictionModel> MpcController<M> {
    pub fn new(model: M, config: MpcConfig) -> Result<Self, MpcError> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            qp_options: QpOptions::default(),
            warm_start: Vec::new(),
        })
    }

    /// Solves the step QP from state `xi` and returns the move `g(t)`.
    pub fn step(
        &mut self,
        xi: &DVector<f64>,
        r_future: &[f64],
        p_future: &[Vec<f64>],
        u_prev: f64,
        u_ref_future: Option<&[f64]>,
    ) -> Result<(f64, StepDiagnostics), MpcError> {
        let qp = build_step_qp(&self.model, &self.config, xi, r_future, p_future, u_prev, u_ref_future)?;
        let sol = solve_with(&qp, self.qp_options, Some(&self.warm_start))?;
        if sol.status != QpStatus::Optimal {
            let mut dump = Vec::new();
            qp.write_debug_csv(&mut dump)?;
            return Err(MpcError::Solver {
                status: sol.status,
                iterations: sol.iterations,
                dump: String::from_utf8_lossy(&dump).into_owned(),
            });
        }
        self.warm_start = sol.active_set.clone();
        let nu = self.config.nu;
        let g = sol.z[0];
        let m0 = self.model.matrices(&p_future[0])?;
        let u_pred = (m0.c.row(1) * xi)[0] + m0.d[(1, 0)] * g;
        Ok((
            g,
            StepDiagnostics {
                g,
                eps: sol.z[nu],
                qp_iters: sol.iterations,
                qp_kkt: sol.kkt_residual,
                active_set_size: sol.active_set.len(),
                u_pred,
            },
        ))
    }

    pub fn reset_warm_start(&mut self) {
        self.warm_start.clear();
    }
}

/// Free-function form of [`MpcController::step`].
pub fn mpc_step<M: PredictionModel>(
    controller: &mut MpcController<M>,
    xi: &DVector<f64>,
    r_future: &[f64],
    p_future: &[Vec<f64>],
    u_prev: f64,
) -> Result<(f64, StepDiagnostics), MpcError> {
    controller.step(xi, r_future, p_future, u_prev, None)
}
