//! Direct identification of the inner LPV controller from open-loop data.
//!
//! The controller is held in input/output form
//!
//! ```text
//! u(t) + sum_i a_i(Pi(t)) u(t-i) = sum_j b_j(Pi(t)) v(t-j),   v = F(q) e
//! ```
//!
//! where `F` is the known fixed part (identity or an integrator) and
//! `Pi(t)` stacks lagged scheduling samples. Each coefficient function is a
//! weighted sum of features of `Pi`: basis functions or Gaussian kernels
//! centred on training samples. A regressor row is therefore the Kronecker
//! product of the structural vector `[-u(t-1..); v(t..)]` with the feature
//! vector, and is never materialised; Gram matrices are built as Hadamard
//! products instead.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refmodel::{left_inverse, virtual_reference, BasisFunction, LpvStateSpace, ModelError};
use crate::signals::{ExperimentLog, SampledSignal, SignalError};

#[derive(Debug, Error)]
pub enum InnerError {
    #[error("invalid controller structure: {0}")]
    Structure(String),
    #[error("misuse: {0}")]
    Misuse(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Known part of the controller applied to the tracking error before the
/// identified dynamics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixedPart {
    #[default]
    Identity,
    /// `1 / (1 - q^-1)`
    Integrator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientModel {
    /// Constant term plus each non-constant basis function applied to every
    /// entry of `Pi`.
    Parametric { basis: Vec<BasisFunction> },
    /// `exp(-|Pi - Pi_j|^2 / sigma)` for every retained training sample `j`.
    Kernel {
        sigma: f64,
        /// Keep every `center_stride`-th training sample as a center.
        #[serde(default = "one")]
        center_stride: usize,
    },
}

fn one() -> usize {
    1
}

impl CoefficientModel {
    pub fn constant() -> Self {
        CoefficientModel::Parametric {
            basis: vec![BasisFunction::Constant],
        }
    }

    pub fn kernel(sigma: f64) -> Self {
        CoefficientModel::Kernel {
            sigma,
            center_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerStructure {
    pub n_a: usize,
    pub n_b: usize,
    #[serde(default)]
    pub scheduling_lags: Vec<usize>,
    pub coefficient_model: CoefficientModel,
    #[serde(default)]
    pub fixed_part: FixedPart,
    pub gamma: f64,
}

impl ControllerStructure {
    /// Fourth-order kernel controller with integral action scheduled on
    /// `p(t-1..t-4)`, as used on the DC motor.
    pub fn dc_motor_default() -> Self {
        Self {
            n_a: 4,
            n_b: 4,
            scheduling_lags: vec![1, 2, 3, 4],
            coefficient_model: CoefficientModel::kernel(2.4),
            fixed_part: FixedPart::Integrator,
            gamma: 64163.0,
        }
    }

    /// First-order kernel controller with integral action scheduled on
    /// `p(t-1)`, as used on the switched RC circuit.
    pub fn switched_rc_default() -> Self {
        Self {
            n_a: 1,
            n_b: 1,
            scheduling_lags: vec![1],
            coefficient_model: CoefficientModel::kernel(1.0),
            fixed_part: FixedPart::Integrator,
            gamma: 1000.0,
        }
    }

    pub fn validate(&self) -> Result<(), InnerError> {
        if self.n_a == 0 && self.n_b == 0 {
            return Err(InnerError::Structure("n_a and n_b cannot both be zero".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(InnerError::Structure(format!("gamma must be finite and > 0, got {}", self.gamma)));
        }
        match &self.coefficient_model {
            CoefficientModel::Parametric { basis } => {
                if !basis.contains(&BasisFunction::Constant) {
                    return Err(InnerError::Structure("parametric basis must contain `constant`".into()));
                }
                if basis.len() > 1 && self.scheduling_lags.is_empty() {
                    return Err(InnerError::Structure(
                        "non-constant basis functions need at least one scheduling lag".into(),
                    ));
                }
            }
            CoefficientModel::Kernel { sigma, center_stride } => {
                if !(*sigma > 0.0) {
                    return Err(InnerError::Structure(format!("sigma must be > 0, got {sigma}")));
                }
                if *center_stride == 0 {
                    return Err(InnerError::Structure("center_stride must be >= 1".into()));
                }
                if self.scheduling_lags.is_empty() {
                    return Err(InnerError::Structure("kernel models need at least one scheduling lag".into()));
                }
            }
        }
        Ok(())
    }

    /// Length of the structural vector: `n_a` input terms and `n_b + 1`
    /// error terms.
    pub fn structural_len(&self) -> usize {
        self.n_a + self.n_b + 1
    }

    pub fn max_scheduling_lag(&self) -> usize {
        self.scheduling_lags.iter().copied().max().unwrap_or(0)
    }

    /// Samples of history needed before a row is complete.
    pub fn max_lag(&self) -> usize {
        self.n_a.max(self.n_b).max(self.max_scheduling_lag())
    }
}

/// Passes an error record through the fixed part. Unavailable samples stay
/// unavailable; the integrator skips over them.
pub fn prefilter_fixed_part(error: &SampledSignal, fixed: FixedPart) -> SampledSignal {
    match fixed {
        FixedPart::Identity => error.clone(),
        FixedPart::Integrator => {
            let mut acc = 0.0;
            let vals = error
                .samples()
                .iter()
                .map(|v| {
                    v.map(|x| {
                        acc += x;
                        acc
                    })
                })
                .collect();
            SampledSignal::with_start(vals, error.sample_period(), error.start_index())
                .expect("same length and period as the input")
        }
    }
}

/// `e*(t) = M^dagger y(t) - y(t)`, the error that would have produced the
/// recorded input under the ideal controller.
pub fn virtual_error(log: &ExperimentLog, reference: &LpvStateSpace) -> Result<SampledSignal, InnerError> {
    let inverse = left_inverse(reference)?;
    let g = virtual_reference(&inverse, &log.y, &log.p)?;
    let vals = g
        .samples()
        .iter()
        .zip(log.y.samples())
        .map(|(g, y)| match (g, y) {
            (Some(g), Some(y)) => Some(g - y),
            _ => None,
        })
        .collect();
    Ok(SampledSignal::with_start(vals, g.sample_period(), g.start_index())?)
}

fn scheduling_vector(p: &[Option<f64>], t: usize, lags: &[usize]) -> Option<Vec<f64>> {
    lags.iter().map(|&l| if l > t { None } else { p[t - l] }).collect()
}

/// Structural vector `[-u(t-1..t-n_a); v(t..t-n_b)]`, or `None` when it
/// touches an unavailable sample.
fn structural_vector(u: &[Option<f64>], v: &[Option<f64>], t: usize, s: &ControllerStructure) -> Option<Vec<f64>> {
    let mut out = Vec::with_capacity(s.structural_len());
    for i in 1..=s.n_a {
        out.push(-u.get(t.checked_sub(i)?).copied().flatten()?);
    }
    for j in 0..=s.n_b {
        out.push(v.get(t.checked_sub(j)?).copied().flatten()?);
    }
    Some(out)
}

/// Gaussian kernel features of `query` against every center.
pub fn build_kernel_features(centers: &[Vec<f64>], query: &[f64], sigma: f64) -> Vec<f64> {
    centers
        .iter()
        .map(|c| {
            let d2: f64 = c.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
            (-d2 / sigma).exp()
        })
        .collect()
}

fn parametric_features(basis: &[BasisFunction], pi: &[f64]) -> Vec<f64> {
    let mut out = vec![1.0];
    for f in basis.iter().filter(|f| **f != BasisFunction::Constant) {
        out.extend(pi.iter().map(|&p| f.eval(p)));
    }
    out
}

/// Feature map of a coefficient model once its centers are fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub model: CoefficientModel,
    /// Kernel centers (empty for parametric models).
    #[serde(default)]
    pub centers: Vec<Vec<f64>>,
}

impl FeatureMap {
    pub fn new(model: CoefficientModel, training_pis: &[Vec<f64>]) -> Self {
        let centers = match &model {
            CoefficientModel::Parametric { .. } => Vec::new(),
            CoefficientModel::Kernel { center_stride, .. } => {
                training_pis.iter().step_by(*center_stride).cloned().collect()
            }
        };
        Self { model, centers }
    }

    pub fn len(&self, n_lags: usize) -> usize {
        match &self.model {
            CoefficientModel::Parametric { basis } => {
                1 + basis.iter().filter(|f| **f != BasisFunction::Constant).count() * n_lags
            }
            CoefficientModel::Kernel { .. } => self.centers.len(),
        }
    }

    pub fn eval(&self, pi: &[f64]) -> Vec<f64> {
        match &self.model {
            CoefficientModel::Parametric { basis } => parametric_features(basis, pi),
            CoefficientModel::Kernel { sigma, .. } => build_kernel_features(&self.centers, pi, *sigma),
        }
    }

    fn matrix(&self, pis: &[Vec<f64>]) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = pis.par_iter().map(|pi| self.eval(pi)).collect();
        let c = rows.first().map_or(0, Vec::len);
        DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j])
    }
}

/// Rows of one data record before feature expansion.
#[derive(Clone, Debug, PartialEq)]
struct RawRows {
    phi: DMatrix<f64>,
    pis: Vec<Vec<f64>>,
    targets: DVector<f64>,
    times: Vec<usize>,
}

fn raw_rows(log: &ExperimentLog, structure: &ControllerStructure, reference: &LpvStateSpace) -> Result<RawRows, InnerError> {
    if log.len() <= structure.max_lag() + 1 {
        return Err(InnerError::Misuse(format!(
            "log with {} samples is too short for lag {}",
            log.len(),
            structure.max_lag()
        )));
    }
    let e = virtual_error(log, reference)?;
    let v = prefilter_fixed_part(&e, structure.fixed_part);
    let u = log.u.samples();
    let p = log.p.samples();
    let mut phi_rows = Vec::new();
    let mut pis = Vec::new();
    let mut targets = Vec::new();
    let mut times = Vec::new();
    for t in 0..log.len() {
        let (Some(target), Some(phi), Some(pi)) = (
            u[t],
            structural_vector(u, v.samples(), t, structure),
            scheduling_vector(p, t, &structure.scheduling_lags),
        ) else {
            continue;
        };
        phi_rows.push(phi);
        pis.push(pi);
        targets.push(target);
        times.push(t);
    }
    if phi_rows.is_empty() {
        return Err(InnerError::Misuse("no complete regressor rows".into()));
    }
    let s = structure.structural_len();
    let phi = DMatrix::from_fn(phi_rows.len(), s, |i, j| phi_rows[i][j]);
    Ok(RawRows {
        phi,
        pis,
        targets: DVector::from_vec(targets),
        times,
    })
}

/// Regression problem with rows `psi(t) = phi(t) (x) f(Pi(t))`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegressionSystem {
    structure: ControllerStructure,
    features: FeatureMap,
    phi: DMatrix<f64>,
    f: DMatrix<f64>,
    targets: DVector<f64>,
    pis: Vec<Vec<f64>>,
    instruments: Option<(DMatrix<f64>, DMatrix<f64>)>,
    instrument_pis: Option<Vec<Vec<f64>>>,
}

/// Builds the regression of the recorded input on the virtual error. With an
/// instrument log, the instrument rows use the same construction on the
/// second record; only time indices complete in both records are kept.
pub fn build_regression(
    log: &ExperimentLog,
    instrument_log: Option<&ExperimentLog>,
    structure: &ControllerStructure,
    reference: &LpvStateSpace,
) -> Result<RegressionSystem, InnerError> {
    structure.validate()?;
    let mut main = raw_rows(log, structure, reference)?;
    let mut inst = match instrument_log {
        Some(l) => {
            if l.len() != log.len() {
                return Err(InnerError::Misuse(format!(
                    "instrument log has {} samples, training log has {}",
                    l.len(),
                    log.len()
                )));
            }
            Some(raw_rows(l, structure, reference)?)
        }
        None => None,
    };
    if let Some(z) = inst.as_mut() {
        if z.times != main.times {
            let common: Vec<usize> = main.times.iter().copied().filter(|t| z.times.contains(t)).collect();
            main = keep_times(&main, &common);
            *z = keep_times(z, &common);
        }
    }
    let features = FeatureMap::new(structure.coefficient_model.clone(), &main.pis);
    let f = features.matrix(&main.pis);
    let (instruments, instrument_pis) = match inst {
        Some(z) => {
            let fz = features.matrix(&z.pis);
            (Some((z.phi, fz)), Some(z.pis))
        }
        None => (None, None),
    };
    Ok(RegressionSystem {
        structure: structure.clone(),
        features,
        phi: main.phi,
        f,
        targets: main.targets,
        pis: main.pis,
        instruments,
        instrument_pis,
    })
}

fn keep_times(rows: &RawRows, keep: &[usize]) -> RawRows {
    let idx: Vec<usize> = rows
        .times
        .iter()
        .enumerate()
        .filter(|(_, t)| keep.contains(t))
        .map(|(i, _)| i)
        .collect();
    RawRows {
        phi: rows.phi.select_rows(idx.iter()),
        pis: idx.iter().map(|&i| rows.pis[i].clone()).collect(),
        targets: rows.targets.select_rows(idx.iter()),
        times: idx.iter().map(|&i| rows.times[i]).collect(),
    }
}

impl RegressionSystem {
    pub fn structure(&self) -> &ControllerStructure {
        &self.structure
    }

    pub fn feature_map(&self) -> &FeatureMap {
        &self.features
    }

    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn row_len(&self) -> usize {
        self.phi.ncols() * self.f.ncols()
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn has_instruments(&self) -> bool {
        self.instruments.is_some()
    }

    /// Full regressor row `k` (for inspection and small problems).
    pub fn row(&self, k: usize) -> DVector<f64> {
        kron_row(&self.phi, &self.f, k)
    }

    pub fn instrument_row(&self, k: usize) -> Option<DVector<f64>> {
        self.instruments.as_ref().map(|(p, f)| kron_row(p, f, k))
    }

    /// Same rows with a different coefficient model (e.g. another kernel
    /// width during cross-validation).
    pub fn with_coefficient_model(&self, model: CoefficientModel) -> Result<Self, InnerError> {
        let mut structure = self.structure.clone();
        structure.coefficient_model = model.clone();
        structure.validate()?;
        let features = FeatureMap::new(model, &self.pis);
        let f = features.matrix(&self.pis);
        let instruments = match (&self.instruments, &self.instrument_pis) {
            (Some((pz, _)), Some(pis)) => Some((pz.clone(), features.matrix(pis))),
            _ => None,
        };
        Ok(Self {
            structure,
            features,
            phi: self.phi.clone(),
            f,
            targets: self.targets.clone(),
            pis: self.pis.clone(),
            instruments,
            instrument_pis: self.instrument_pis.clone(),
        })
    }

    /// `Psi^T w` reshaped as the `structural x features` weight matrix.
    fn transpose_times(&self, w: &DVector<f64>) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.phi.nrows(), self.phi.ncols(), |i, j| self.phi[(i, j)] * w[i]);
        scaled.transpose() * &self.f
    }

    fn gram(&self) -> DMatrix<f64> {
        (&self.phi * self.phi.transpose()).component_mul(&(&self.f * self.f.transpose()))
    }

    fn dense(&self) -> DMatrix<f64> {
        dense_rows(&self.phi, &self.f)
    }
}

fn kron_row(phi: &DMatrix<f64>, f: &DMatrix<f64>, k: usize) -> DVector<f64> {
    let c = f.ncols();
    DVector::from_fn(phi.ncols() * c, |idx, _| phi[(k, idx / c)] * f[(k, idx % c)])
}

fn dense_rows(phi: &DMatrix<f64>, f: &DMatrix<f64>) -> DMatrix<f64> {
    let c = f.ncols();
    DMatrix::from_fn(phi.nrows(), phi.ncols() * c, |k, idx| phi[(k, idx / c)] * f[(k, idx % c)])
}

/// Estimated coefficient weights: coefficient `i` of the structural vector is
/// `sum_j weights[(i, j)] f_j(Pi)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights(pub DMatrix<f64>);

impl Weights {
    /// Weights flattened in regressor-row order.
    pub fn as_vector(&self) -> DVector<f64> {
        let (s, c) = self.0.shape();
        DVector::from_fn(s * c, |idx, _| self.0[(idx / c, idx % c)])
    }

    fn from_vector(theta: &DVector<f64>, s: usize, c: usize) -> Self {
        Weights(DMatrix::from_fn(s, c, |i, j| theta[i * c + j]))
    }
}

const COND_WARN: f64 = 1e12;

fn cholesky_solve(mut a: DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>, InnerError> {
    a = (&a + a.transpose()) * 0.5;
    let Some(chol) = a.clone().cholesky() else {
        // round-off can break definiteness when the ridge term is tiny
        log::warn!("{what}: Cholesky failed, falling back to LU");
        return a
            .lu()
            .solve(b)
            .ok_or_else(|| InnerError::Numerical(format!("{what}: matrix is singular")));
    };
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = diag.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &d| (lo.min(d.abs()), hi.max(d.abs())));
    let cond = (hi / lo).powi(2);
    if cond > COND_WARN {
        log::warn!("{what}: condition estimate {cond:.3e}");
    }
    Ok(chol.solve(b))
}

/// Ridge least squares
/// `min (1/gamma)|theta|^2 + (1/N) sum |u(t) - psi(t)^T theta|^2`.
/// Uses the normal equations when the row length is at most the row count
/// and the equivalent `N x N` dual system otherwise.
pub fn fit_ls(system: &RegressionSystem, gamma: f64) -> Result<Weights, InnerError> {
    check_gamma(gamma)?;
    let n = system.n_rows() as f64;
    let (s, c) = (system.phi.ncols(), system.f.ncols());
    if system.row_len() <= system.n_rows() {
        let psi = system.dense();
        let mut a = psi.transpose() * &psi / n;
        for i in 0..a.nrows() {
            a[(i, i)] += 1.0 / gamma;
        }
        let b = psi.transpose() * &system.targets / n;
        let theta = cholesky_solve(a, &b, "ls normal equations")?;
        Ok(Weights::from_vector(&theta, s, c))
    } else {
        let mut k = system.gram();
        for i in 0..k.nrows() {
            k[(i, i)] += n / gamma;
        }
        let alpha = cholesky_solve(k, &system.targets, "ls dual system")?;
        Ok(Weights(system.transpose_times(&alpha)))
    }
}

/// Instrumental-variable estimate
/// `min (1/gamma)|theta|^2 + |(1/N) sum z(t) (u(t) - psi(t)^T theta)|^2`.
pub fn fit_iv(system: &RegressionSystem, gamma: f64) -> Result<Weights, InnerError> {
    check_gamma(gamma)?;
    let (phi_z, f_z) = system
        .instruments
        .as_ref()
        .ok_or_else(|| InnerError::Misuse("fit_iv needs an instrument log".into()))?;
    let n = system.n_rows() as f64;
    let (s, c) = (system.phi.ncols(), system.f.ncols());
    if system.row_len() <= system.n_rows() {
        let psi = system.dense();
        let z = dense_rows(phi_z, f_z);
        let s_zp = z.transpose() * &psi / n;
        let s_zt = z.transpose() * &system.targets / n;
        let mut a = s_zp.transpose() * &s_zp;
        for i in 0..a.nrows() {
            a[(i, i)] += 1.0 / gamma;
        }
        let b = s_zp.transpose() * s_zt;
        let theta = cholesky_solve(a, &b, "iv normal equations")?;
        Ok(Weights::from_vector(&theta, s, c))
    } else {
        // theta = Psi^T beta with (G K + I/gamma) beta = G tau,
        // G = Z Z^T / N^2, K = Psi Psi^T.
        let g = (phi_z * phi_z.transpose()).component_mul(&(f_z * f_z.transpose())) / (n * n);
        let k = system.gram();
        let mut a = &g * &k;
        for i in 0..a.nrows() {
            a[(i, i)] += 1.0 / gamma;
        }
        let rhs = &g * &system.targets;
        let beta = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| InnerError::Numerical("iv dual system is singular".into()))?;
        Ok(Weights(system.transpose_times(&beta)))
    }
}

fn check_gamma(gamma: f64) -> Result<(), InnerError> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(InnerError::Misuse(format!("gamma must be finite and > 0, got {gamma}")))
    }
}

/// Residual `u(t) - psi(t)^T theta` for every row of `system`.
pub fn residuals(system: &RegressionSystem, weights: &Weights) -> DVector<f64> {
    // psi^T theta = phi^T W f
    let pred = (&system.phi * &weights.0).component_mul(&system.f).column_sum();
    &system.targets - pred
}

/// Identified controller ready to run.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerControllerModel {
    pub structure: ControllerStructure,
    pub features: FeatureMap,
    pub weights: Weights,
    pub reference_model: LpvStateSpace,
}

/// Coefficients of the controller recursion at one scheduling vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerCoefficients {
    /// `a_1..a_{n_a}`
    pub a: Vec<f64>,
    /// `b_0..b_{n_b}`
    pub b: Vec<f64>,
}

impl InnerControllerModel {
    /// Controller with constant coefficients. `a` holds `a_1..a_{n_a}` and
    /// `b` holds `b_0..b_{n_b}`.
    pub fn constant(a: &[f64], b: &[f64], fixed_part: FixedPart, reference_model: LpvStateSpace) -> Result<Self, InnerError> {
        if b.is_empty() {
            return Err(InnerError::Structure("b needs at least b_0".into()));
        }
        let structure = ControllerStructure {
            n_a: a.len(),
            n_b: b.len() - 1,
            scheduling_lags: Vec::new(),
            coefficient_model: CoefficientModel::constant(),
            fixed_part,
            gamma: 1.0,
        };
        let w: Vec<f64> = a.iter().chain(b).copied().collect();
        Ok(Self {
            structure,
            features: FeatureMap::new(CoefficientModel::constant(), &[]),
            weights: Weights(DMatrix::from_column_slice(w.len(), 1, &w)),
            reference_model,
        })
    }

    pub fn from_fit(system: &RegressionSystem, weights: Weights, reference_model: LpvStateSpace) -> Self {
        Self {
            structure: system.structure.clone(),
            features: system.features.clone(),
            weights,
            reference_model,
        }
    }

    pub fn coefficients(&self, pi: &[f64]) -> ControllerCoefficients {
        let f = DVector::from_vec(self.features.eval(pi));
        let all = &self.weights.0 * f;
        ControllerCoefficients {
            a: all.rows(0, self.structure.n_a).iter().copied().collect(),
            b: all.rows(self.structure.n_a, self.structure.n_b + 1).iter().copied().collect(),
        }
    }

    /// Builds `Pi(t)` from the current scheduling sample and `p(t-1), p(t-2), ...`.
    pub fn scheduling_vector(&self, p_now: f64, p_past: &[f64]) -> Vec<f64> {
        self.structure
            .scheduling_lags
            .iter()
            .map(|&l| if l == 0 { p_now } else { p_past.get(l - 1).copied().unwrap_or(0.0) })
            .collect()
    }

    pub fn initial_history(&self) -> ControllerHistory {
        ControllerHistory {
            u: vec![0.0; self.structure.n_a],
            v: vec![0.0; self.structure.n_b],
            integral: 0.0,
            p: vec![0.0; self.structure.max_scheduling_lag()],
        }
    }

    /// One sample of the controller: forms `e = g - y`, applies the fixed
    /// part, evaluates the coefficients at `Pi(t)`, and returns `u(t)`.
    pub fn controller_step(&self, history: &mut ControllerHistory, g: f64, y: f64, p: f64) -> f64 {
        let pi = self.scheduling_vector(p, &history.p);
        let coeffs = self.coefficients(&pi);
        let e = g - y;
        let v = match self.structure.fixed_part {
            FixedPart::Identity => e,
            FixedPart::Integrator => history.integral + e,
        };
        let mut u = coeffs.b[0] * v;
        for (j, vj) in history.v.iter().enumerate() {
            u += coeffs.b[j + 1] * vj;
        }
        for (i, ui) in history.u.iter().enumerate() {
            u -= coeffs.a[i] * ui;
        }
        push_front(&mut history.u, u);
        push_front(&mut history.v, v);
        push_front(&mut history.p, p);
        history.integral = v;
        u
    }
}

fn push_front(buf: &mut [f64], x: f64) {
    if buf.is_empty() {
        return;
    }
    buf.rotate_right(1);
    buf[0] = x;
}

/// Past values held by a running controller, most recent first.
#[derive(Clone, Debug, PartialEq)]
pub struct ControllerHistory {
    /// `u(t-1..t-n_a)`
    pub u: Vec<f64>,
    /// Filtered error `v(t-1..t-n_b)`.
    pub v: Vec<f64>,
    /// Integrator state `v(t-1)` (unused without an integrator).
    pub integral: f64,
    /// `p(t-1..t-L)`
    pub p: Vec<f64>,
}

/// Free-function form of [`InnerControllerModel::controller_step`].
pub fn controller_step(ctrl: &InnerControllerModel, history: &mut ControllerHistory, g: f64, y: f64, p: f64) -> f64 {
    ctrl.controller_step(history, g, y, p)
}

/// Result of a grid search.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossValidation {
    pub gamma: f64,
    pub sigma: Option<f64>,
    /// `(gamma, sigma, mean squared validation residual)` for every point.
    pub scores: Vec<(f64, Option<f64>, f64)>,
}

/// Fits on the training log for each `(gamma, sigma)` and scores the mean
/// squared residual of the validation log's regression. `sigma` is ignored
/// (pass `None`) for parametric models. Ties go to the larger gamma, then the
/// larger sigma.
pub fn cross_validate(
    log_train: &ExperimentLog,
    instrument_log: Option<&ExperimentLog>,
    log_val: &ExperimentLog,
    grid: &[(f64, Option<f64>)],
    structure: &ControllerStructure,
    reference: &LpvStateSpace,
) -> Result<CrossValidation, InnerError> {
    if grid.is_empty() {
        return Err(InnerError::Misuse("cross-validation grid is empty".into()));
    }
    let base = build_regression(log_train, instrument_log, structure, reference)?;
    let val_rows = raw_rows(log_val, structure, reference)?;
    let scores: Vec<Result<(f64, Option<f64>, f64), InnerError>> = grid
        .par_iter()
        .map(|&(gamma, sigma)| {
            let system = match (sigma, &structure.coefficient_model) {
                (Some(sigma), CoefficientModel::Kernel { center_stride, .. }) => {
                    base.with_coefficient_model(CoefficientModel::Kernel {
                        sigma,
                        center_stride: *center_stride,
                    })?
                }
                _ => base.clone(),
            };
            let w = if system.has_instruments() {
                fit_iv(&system, gamma)?
            } else {
                fit_ls(&system, gamma)?
            };
            let f_val = system.features.matrix(&val_rows.pis);
            let pred = (&val_rows.phi * &w.0).component_mul(&f_val).column_sum();
            let mut resid = &val_rows.targets - pred;
            if structure.fixed_part == FixedPart::Integrator {
                // The integrated error restarts at zero where the validation
                // record starts, so its true level is off by an unknown
                // constant c. It enters the prediction as c * sum_j b_j(t).
                let mut shift = DMatrix::zeros(val_rows.phi.nrows(), val_rows.phi.ncols());
                shift.columns_mut(structure.n_a, structure.n_b + 1).fill(1.0);
                let s = (&shift * &w.0).component_mul(&f_val).column_sum();
                let ss = s.norm_squared();
                if ss > 0.0 {
                    resid -= &s * (resid.dot(&s) / ss);
                }
            }
            let mse = resid.norm_squared() / val_rows.targets.len() as f64;
            Ok((gamma, sigma, mse))
        })
        .collect();
    let scores = scores.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut best = scores[0];
    for &cand in &scores[1..] {
        let better = cand.2 < best.2
            || (cand.2 == best.2
                && (cand.0 > best.0 || (cand.0 == best.0 && cand.1.unwrap_or(0.0) > best.1.unwrap_or(0.0))));
        if better {
            best = cand;
        }
    }
    Ok(CrossValidation {
        gamma: best.0,
        sigma: best.1,
        scores,
    })
}

/// Fits a controller on `log` (with IV when `instrument_log` is given).
pub fn identify(
    log: &ExperimentLog,
    instrument_log: Option<&ExperimentLog>,
    structure: &ControllerStructure,
    reference: &LpvStateSpace,
) -> Result<(InnerControllerModel, FitReport), InnerError> {
    let system = build_regression(log, instrument_log, structure, reference)?;
    let weights = if system.has_instruments() {
        fit_iv(&system, structure.gamma)?
    } else {
        fit_ls(&system, structure.gamma)?
    };
    let res = residuals(&system, &weights);
    let report = FitReport {
        rows: system.n_rows(),
        row_len: system.row_len(),
        residual_rms: (res.norm_squared() / res.len() as f64).sqrt(),
        target_rms: (system.targets.norm_squared() / res.len() as f64).sqrt(),
        instrumental: system.has_instruments(),
    };
    Ok((InnerControllerModel::from_fit(&system, weights, reference.clone()), report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub rows: usize,
    pub row_len: usize,
    pub residual_rms: f64,
    pub target_rms: f64,
    pub instrumental: bool,
}

/// On-disk form of a fitted controller.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerFile {
    pub structure: ControllerStructure,
    #[serde(default)]
    pub centers: Vec<Vec<f64>>,
    /// One row per structural term (`a_1..a_{n_a}, b_0..b_{n_b}`), one column
    /// per feature.
    pub weights: Vec<Vec<f64>>,
    pub reference_model: LpvStateSpace,
}

impl From<&InnerControllerModel> for ControllerFile {
    fn from(c: &InnerControllerModel) -> Self {
        let w = &c.weights.0;
        ControllerFile {
            structure: c.structure.clone(),
            centers: c.features.centers.clone(),
            weights: (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect(),
            reference_model: c.reference_model.clone(),
        }
    }
}

impl TryFrom<ControllerFile> for InnerControllerModel {
    type Error = InnerError;

    fn try_from(f: ControllerFile) -> Result<Self, InnerError> {
        f.structure.validate()?;
        let features = FeatureMap {
            model: f.structure.coefficient_model.clone(),
            centers: f.centers,
        };
        let rows = f.structure.structural_len();
        let cols = features.len(f.structure.scheduling_lags.len());
        if f.weights.len() != rows || f.weights.iter().any(|r| r.len() != cols) {
            return Err(InnerError::Structure(format!("weights must be {rows} rows of {cols} values")));
        }
        if features.centers.iter().any(|c| c.len() != f.structure.scheduling_lags.len()) {
            return Err(InnerError::Structure("center length differs from the scheduling lag count".into()));
        }
        Ok(Self {
            weights: Weights(DMatrix::from_fn(rows, cols, |i, j| f.weights[i][j])),
            structure: f.structure,
            features,
            reference_model: f.reference_model,
        })
    }
}
