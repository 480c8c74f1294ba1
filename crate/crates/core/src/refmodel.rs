//! Parameter-dependent state-space models and their left inverses.
//!
//! Coefficient matrices are affine in a declared list of scalar functions of
//! the scheduling value: `A(p) = sum_k f_k(p) A_k`, same for `B`, `C`, `D`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::{SampledSignal, SignalError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("model is not invertible: {0}")]
    NonInvertible(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// Scalar functions of the scheduling value used as coefficient bases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisFunction {
    Constant,
    Linear,
    Quadratic,
    Sin,
    Cos,
    Sinc,
}

impl BasisFunction {
    pub fn eval(self, p: f64) -> f64 {
        match self {
            BasisFunction::Constant => 1.0,
            BasisFunction::Linear => p,
            BasisFunction::Quadratic => p * p,
            BasisFunction::Sin => p.sin(),
            BasisFunction::Cos => p.cos(),
            BasisFunction::Sinc => crate::plant_lab::sinc(p),
        }
    }
}

/// Concrete matrices of a model frozen at one scheduling value.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSpaceMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LpvStateSpaceSpec", into = "LpvStateSpaceSpec")]
pub struct LpvStateSpace {
    n_x: usize,
    n_u: usize,
    n_y: usize,
    basis: Vec<BasisFunction>,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    c: Vec<DMatrix<f64>>,
    d: Vec<DMatrix<f64>>,
    scheduling_range: (f64, f64),
}

/// Serialized form: one row-major matrix per basis element.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LpvStateSpaceSpec {
    pub n_x: usize,
    #[serde(default = "one")]
    pub n_u: usize,
    #[serde(default = "one")]
    pub n_y: usize,
    #[serde(default = "constant_basis")]
    pub basis: Vec<BasisFunction>,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    #[serde(default)]
    pub d: Vec<Vec<f64>>,
    #[serde(default = "default_range")]
    pub scheduling_range: [f64; 2],
}

fn one() -> usize {
    1
}

fn constant_basis() -> Vec<BasisFunction> {
    vec![BasisFunction::Constant]
}

fn default_range() -> [f64; 2] {
    [-10.0, 10.0]
}

impl TryFrom<LpvStateSpaceSpec> for LpvStateSpace {
    type Error = ModelError;

    fn try_from(s: LpvStateSpaceSpec) -> Result<Self, ModelError> {
        let nb = s.basis.len();
        let build = |name: &str, data: &[Vec<f64>], rows: usize, cols: usize| -> Result<Vec<DMatrix<f64>>, ModelError> {
            if data.is_empty() {
                return Ok(vec![DMatrix::zeros(rows, cols); nb]);
            }
            if data.len() != nb {
                return Err(ModelError::Shape(format!(
                    "`{name}` has {} matrices for {nb} basis functions",
                    data.len()
                )));
            }
            data.iter()
                .map(|m| {
                    if m.len() != rows * cols {
                        Err(ModelError::Shape(format!(
                            "`{name}` entry has {} values, expected {rows}x{cols}",
                            m.len()
                        )))
                    } else {
                        Ok(DMatrix::from_row_slice(rows, cols, m))
                    }
                })
                .collect()
        };
        let model = LpvStateSpace::new(
            s.basis.clone(),
            build("a", &s.a, s.n_x, s.n_x)?,
            build("b", &s.b, s.n_x, s.n_u)?,
            build("c", &s.c, s.n_y, s.n_x)?,
            build("d", &s.d, s.n_y, s.n_u)?,
        )?;
        Ok(model.with_scheduling_range(s.scheduling_range[0], s.scheduling_range[1]))
    }
}

impl From<LpvStateSpace> for LpvStateSpaceSpec {
    fn from(m: LpvStateSpace) -> Self {
        let flat = |v: &[DMatrix<f64>]| -> Vec<Vec<f64>> {
            v.iter()
                .map(|mat| {
                    let mut out = Vec::with_capacity(mat.len());
                    for i in 0..mat.nrows() {
                        for j in 0..mat.ncols() {
                            out.push(mat[(i, j)]);
                        }
                    }
                    out
                })
                .collect()
        };
        LpvStateSpaceSpec {
            n_x: m.n_x,
            n_u: m.n_u,
            n_y: m.n_y,
            basis: m.basis.clone(),
            a: flat(&m.a),
            b: flat(&m.b),
            c: flat(&m.c),
            d: flat(&m.d),
            scheduling_range: [m.scheduling_range.0, m.scheduling_range.1],
        }
    }
}

impl LpvStateSpace {
    pub fn new(
        basis: Vec<BasisFunction>,
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        c: Vec<DMatrix<f64>>,
        d: Vec<DMatrix<f64>>,
    ) -> Result<Self, ModelError> {
        if !basis.contains(&BasisFunction::Constant) {
            return Err(ModelError::Shape("basis must contain the constant function".into()));
        }
        let nb = basis.len();
        if [a.len(), b.len(), c.len(), d.len()].iter().any(|&l| l != nb) {
            return Err(ModelError::Shape("one matrix per basis function is required".into()));
        }
        let n_x = a[0].nrows();
        let n_u = b[0].ncols();
        let n_y = c[0].nrows();
        for k in 0..nb {
            let ok = a[k].shape() == (n_x, n_x)
                && b[k].shape() == (n_x, n_u)
                && c[k].shape() == (n_y, n_x)
                && d[k].shape() == (n_y, n_u);
            if !ok {
                return Err(ModelError::Shape(format!("inconsistent matrix sizes at basis index {k}")));
            }
        }
        Ok(Self {
            n_x,
            n_u,
            n_y,
            basis,
            a,
            b,
            c,
            d,
            scheduling_range: (-10.0, 10.0),
        })
    }

    pub fn lti(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self, ModelError> {
        Self::new(vec![BasisFunction::Constant], vec![a], vec![b], vec![c], vec![d])
    }

    /// `x(t+1) = pole x(t) + gain g(t)`, `y(t) = x(t)`.
    pub fn first_order(pole: f64, gain: f64) -> Self {
        Self::lti(
            DMatrix::from_element(1, 1, pole),
            DMatrix::from_element(1, 1, gain),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::zeros(1, 1),
        )
        .expect("1x1 shapes")
    }

    /// First-order model with unit DC gain.
    pub fn unit_gain_first_order(pole: f64) -> Self {
        Self::first_order(pole, 1.0 - pole)
    }

    /// Memoryless `y = d u`.
    pub fn static_gain(d: f64) -> Self {
        Self::lti(
            DMatrix::zeros(0, 0),
            DMatrix::zeros(0, 1),
            DMatrix::zeros(1, 0),
            DMatrix::from_element(1, 1, d),
        )
        .expect("static shapes")
    }

    pub fn with_scheduling_range(mut self, lo: f64, hi: f64) -> Self {
        self.scheduling_range = (lo.min(hi), hi.max(lo));
        self
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn basis(&self) -> &[BasisFunction] {
        &self.basis
    }

    pub fn scheduling_range(&self) -> (f64, f64) {
        self.scheduling_range
    }

    pub fn is_siso(&self) -> bool {
        self.n_u == 1 && self.n_y == 1
    }

    /// True when every non-constant basis coefficient is zero.
    pub fn is_lti(&self) -> bool {
        self.basis.iter().enumerate().all(|(k, f)| {
            *f == BasisFunction::Constant
                || (self.a[k].iter().chain(self.b[k].iter()).chain(self.c[k].iter()).chain(self.d[k].iter()))
                    .all(|&v| v == 0.0)
        })
    }

    pub fn is_strictly_proper(&self) -> bool {
        self.d.iter().all(|d| d.iter().all(|&v| v == 0.0))
    }

    pub fn evaluate(&self, p: f64) -> StateSpaceMatrices {
        let mut out = StateSpaceMatrices {
            a: DMatrix::zeros(self.n_x, self.n_x),
            b: DMatrix::zeros(self.n_x, self.n_u),
            c: DMatrix::zeros(self.n_y, self.n_x),
            d: DMatrix::zeros(self.n_y, self.n_u),
        };
        for (k, f) in self.basis.iter().enumerate() {
            let w = f.eval(p);
            if w == 0.0 {
                continue;
            }
            out.a += &self.a[k] * w;
            out.b += &self.b[k] * w;
            out.c += &self.c[k] * w;
            out.d += &self.d[k] * w;
        }
        out
    }

    fn scheduling_grid(&self) -> Vec<f64> {
        if self.is_lti() {
            return vec![0.0];
        }
        let (lo, hi) = self.scheduling_range;
        let n = 61;
        (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
    }
}

/// Runs `x(t+1) = A x + B u`, `out = C x + D u` for a SISO model and returns
/// the output together with the states `x(0..=N)`.
pub fn simulate(
    model: &LpvStateSpace,
    input: &SampledSignal,
    p: &SampledSignal,
    x0: &DVector<f64>,
) -> Result<(SampledSignal, Vec<DVector<f64>>), ModelError> {
    if !model.is_siso() {
        return Err(ModelError::Shape("simulate expects a SISO model".into()));
    }
    if input.len() != p.len() {
        return Err(ModelError::Shape(format!(
            "input has {} samples, scheduling has {}",
            input.len(),
            p.len()
        )));
    }
    if x0.len() != model.n_x {
        return Err(ModelError::Shape(format!("x0 has {} entries, model has {} states", x0.len(), model.n_x)));
    }
    let u = input.dense()?;
    let pv = p.dense()?;
    let mut x = x0.clone();
    let mut states = Vec::with_capacity(u.len() + 1);
    let mut out = Vec::with_capacity(u.len());
    for (&uk, &pk) in u.iter().zip(&pv) {
        let m = model.evaluate(pk);
        out.push(Some((&m.c * &x)[0] + m.d[(0, 0)] * uk));
        states.push(x.clone());
        x = &m.a * &x + &m.b * uk;
    }
    states.push(x);
    let y = SampledSignal::with_start(out, input.sample_period(), input.start_index())?;
    Ok((y, states))
}

/// Left inverse of a SISO model with relative degree 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LeftInverseFilter {
    source: LpvStateSpace,
    relative_degree: usize,
}

const MARKOV_FLOOR: f64 = 1e-12;

pub fn left_inverse(model: &LpvStateSpace) -> Result<LeftInverseFilter, ModelError> {
    if !model.is_siso() {
        return Err(ModelError::Unsupported("left inverse needs a SISO model".into()));
    }
    let grid = model.scheduling_grid();
    let evals: Vec<StateSpaceMatrices> = grid.iter().map(|&p| model.evaluate(p)).collect();
    let d_mag: Vec<f64> = evals.iter().map(|m| m.d[(0, 0)].abs()).collect();
    if d_mag.iter().all(|&d| d >= MARKOV_FLOOR) {
        return Ok(LeftInverseFilter {
            source: model.clone(),
            relative_degree: 0,
        });
    }
    if d_mag.iter().any(|&d| d >= MARKOV_FLOOR) {
        return Err(ModelError::NonInvertible(
            "feedthrough vanishes on part of the scheduling range".into(),
        ));
    }
    if model.n_x == 0 {
        return Err(ModelError::NonInvertible("static model with zero gain".into()));
    }
    // first Markov parameter C(p(t+1)) B(p(t)) over all pairs of grid points
    let mut min_cb = f64::INFINITY;
    let mut max_cb: f64 = 0.0;
    for next in &evals {
        for now in &evals {
            let cb = (&next.c * &now.b)[(0, 0)].abs();
            min_cb = min_cb.min(cb);
            max_cb = max_cb.max(cb);
        }
    }
    if min_cb >= MARKOV_FLOOR {
        Ok(LeftInverseFilter {
            source: model.clone(),
            relative_degree: 1,
        })
    } else if max_cb < MARKOV_FLOOR {
        Err(ModelError::Unsupported(
            "relative degree above one is not supported".into(),
        ))
    } else {
        Err(ModelError::NonInvertible(
            "first Markov parameter vanishes on part of the scheduling range".into(),
        ))
    }
}

impl LeftInverseFilter {
    pub fn relative_degree(&self) -> usize {
        self.relative_degree
    }

    pub fn source(&self) -> &LpvStateSpace {
        &self.source
    }
}

/// Batch inverse over a record. The result is causal: sample `t` holds the
/// reconstructed input at `t - r`, so the first `r` samples are unavailable.
/// Shift by `-r` (see [`virtual_reference`]) to align it with `y`.
///
/// The inverse recursion starts from the minimum-norm state consistent with
/// `y(0)`.
pub fn apply_inverse(
    filter: &LeftInverseFilter,
    y: &SampledSignal,
    p: &SampledSignal,
) -> Result<SampledSignal, ModelError> {
    let r = filter.relative_degree;
    if y.len() < r + 1 {
        return Err(ModelError::Shape(format!("need at least {} samples", r + 1)));
    }
    if y.len() != p.len() {
        return Err(ModelError::Shape("y and p lengths differ".into()));
    }
    let yv = y.dense()?;
    let pv = p.dense()?;
    let m = &filter.source;
    let n = yv.len();
    let mut out = vec![None; n];
    let first = m.evaluate(pv[0]);
    let mut x = initial_state(&first, yv[0], r);
    match r {
        0 => {
            for t in 0..n {
                let mt = m.evaluate(pv[t]);
                let g = (yv[t] - (&mt.c * &x)[0]) / mt.d[(0, 0)];
                out[t] = Some(g);
                x = &mt.a * &x + &mt.b * g;
            }
        }
        _ => {
            let mut now = first;
            for t in 0..n - 1 {
                let next = m.evaluate(pv[t + 1]);
                let ca = &next.c * &now.a;
                let cb = (&next.c * &now.b)[(0, 0)];
                let g = (yv[t + 1] - (&ca * &x)[0]) / cb;
                out[t + 1] = Some(g);
                x = &now.a * &x + &now.b * g;
                now = next;
            }
        }
    }
    Ok(SampledSignal::with_start(out, y.sample_period(), y.start_index())?)
}

fn initial_state(m: &StateSpaceMatrices, y0: f64, r: usize) -> DVector<f64> {
    let n = m.a.nrows();
    if r == 0 || n == 0 {
        return DVector::zeros(n);
    }
    let c = m.c.row(0).transpose();
    let nc = c.norm_squared();
    if nc == 0.0 {
        DVector::zeros(n)
    } else {
        c * (y0 / nc)
    }
}

/// `apply_inverse` aligned with `y`: sample `t` is the reference that drives
/// the model to `y` (the last `r` samples are unavailable).
pub fn virtual_reference(
    filter: &LeftInverseFilter,
    y: &SampledSignal,
    p: &SampledSignal,
) -> Result<SampledSignal, ModelError> {
    Ok(apply_inverse(filter, y, p)?.shift(-(filter.relative_degree as i64)))
}

/// Continuous-equivalent cutoff of a discrete first-order pole.
pub fn cutoff_hz(pole: f64, period: f64) -> f64 {
    -pole.ln() / (2.0 * std::f64::consts::PI * period)
}

pub fn pole_for_cutoff(cutoff_hz: f64, period: f64) -> f64 {
    (-2.0 * std::f64::consts::PI * cutoff_hz * period).exp()
}
