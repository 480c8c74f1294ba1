//! State-space realization of the inner closed loop seen from the outer
//! governor: input `g`, outputs `[y; u]`.
//!
//! The loop is assumed to behave like the reference model, so `y` comes from
//! `M` and `u` from the identified controller driven by `e = g - y`. The
//! state is a non-minimal shift register
//!
//! ```text
//! xi(t) = [x_M(t); u(t-1..t-n_a); e(t-1..t-n_b); e_int(t-1)]
//! ```
//!
//! with the integrator entry present only when the controller has one.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inner_synth::{ControllerFile, FixedPart, InnerControllerModel, InnerError};
use crate::refmodel::{LpvStateSpace, StateSpaceMatrices};

#[derive(Debug, Error)]
pub enum RealizationError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Inner(#[from] InnerError),
}

/// Where each group of entries sits inside the augmented state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateLayout {
    pub x_m: Range<usize>,
    pub u_past: Range<usize>,
    pub e_past: Range<usize>,
    pub integrator: Option<usize>,
    pub dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedModel {
    reference: LpvStateSpace,
    controller: InnerControllerModel,
    layout: StateLayout,
}

/// Assembles the augmented model. The reference model must be SISO and
/// strictly proper so that `y` has no feedthrough from `g`.
pub fn build_augmented(reference: &LpvStateSpace, controller: &InnerControllerModel) -> Result<AugmentedModel, RealizationError> {
    if !reference.is_siso() {
        return Err(RealizationError::Config("reference model must be SISO".into()));
    }
    if !reference.is_strictly_proper() {
        return Err(RealizationError::Config("reference model must be strictly proper".into()));
    }
    let s = &controller.structure;
    let n_x = reference.n_x();
    let x_m = 0..n_x;
    let u_past = n_x..n_x + s.n_a;
    let e_past = u_past.end..u_past.end + s.n_b;
    let (integrator, dim) = match s.fixed_part {
        FixedPart::Identity => (None, e_past.end),
        FixedPart::Integrator => (Some(e_past.end), e_past.end + 1),
    };
    Ok(AugmentedModel {
        reference: reference.clone(),
        controller: controller.clone(),
        layout: StateLayout {
            x_m,
            u_past,
            e_past,
            integrator,
            dim,
        },
    })
}

impl AugmentedModel {
    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn state_dim(&self) -> usize {
        self.layout.dim
    }

    pub fn reference(&self) -> &LpvStateSpace {
        &self.reference
    }

    pub fn controller(&self) -> &InnerControllerModel {
        &self.controller
    }

    /// Number of entries of the scheduling vector `[p(t), p(t-1), .., p(t-L)]`.
    pub fn p_vector_len(&self) -> usize {
        self.controller.structure.max_scheduling_lag() + 1
    }

    /// True when neither part depends on the scheduling signal.
    pub fn is_lti(&self) -> bool {
        self.reference.is_lti() && self.controller.structure.scheduling_lags.is_empty()
    }

    /// Concrete `(A, B, C, D)` for `p_vector = [p(t), p(t-1), .., p(t-L)]`.
    /// Output rows are `[y; u]`.
    pub fn evaluate_at(&self, p_vector: &[f64]) -> Result<StateSpaceMatrices, RealizationError> {
        if p_vector.len() != self.p_vector_len() {
            return Err(RealizationError::Shape(format!(
                "p_vector has {} entries, expected {}",
                p_vector.len(),
                self.p_vector_len()
            )));
        }
        let m = self.reference.evaluate(p_vector[0]);
        let s = &self.controller.structure;
        let pi = self.controller.scheduling_vector(p_vector[0], &p_vector[1..]);
        let k = self.controller.coefficients(&pi);
        let l = &self.layout;
        let n = l.dim;
        let cm = m.c.row(0);

        // u(t) = cu xi + du g
        let mut cu = DVector::<f64>::zeros(n);
        for (i, a) in k.a.iter().enumerate() {
            cu[l.u_past.start + i] = -a;
        }
        let b0 = k.b[0];
        for (c, idx) in cm.iter().zip(l.x_m.clone()) {
            cu[idx] = -b0 * c;
        }
        match l.integrator {
            None => {
                for j in 1..=s.n_b {
                    cu[l.e_past.start + j - 1] = k.b[j];
                }
            }
            Some(ii) => {
                // v(t-j) = e_int(t-1) - sum_{i=1}^{j-1} e(t-i)
                cu[ii] = k.b.iter().sum();
                for i in 1..=s.n_b {
                    let tail: f64 = k.b[i + 1..].iter().sum();
                    cu[l.e_past.start + i - 1] = -tail;
                }
            }
        }
        let du = b0;

        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, 1);
        a.view_mut((l.x_m.start, l.x_m.start), (l.x_m.len(), l.x_m.len())).copy_from(&m.a);
        b.view_mut((l.x_m.start, 0), (l.x_m.len(), 1)).copy_from(&m.b);
        if !l.u_past.is_empty() {
            a.row_mut(l.u_past.start).copy_from(&cu.transpose());
            b[(l.u_past.start, 0)] = du;
            for i in 1..l.u_past.len() {
                a[(l.u_past.start + i, l.u_past.start + i - 1)] = 1.0;
            }
        }
        let e_row = |a: &mut DMatrix<f64>, b: &mut DMatrix<f64>, row: usize| {
            for (c, idx) in cm.iter().zip(l.x_m.clone()) {
                a[(row, idx)] -= c;
            }
            b[(row, 0)] = 1.0;
        };
        if !l.e_past.is_empty() {
            e_row(&mut a, &mut b, l.e_past.start);
            for i in 1..l.e_past.len() {
                a[(l.e_past.start + i, l.e_past.start + i - 1)] = 1.0;
            }
        }
        if let Some(ii) = l.integrator {
            a[(ii, ii)] = 1.0;
            e_row(&mut a, &mut b, ii);
        }
        let mut c = DMatrix::zeros(2, n);
        for (cv, idx) in cm.iter().zip(l.x_m.clone()) {
            c[(0, idx)] = *cv;
        }
        c.row_mut(1).copy_from(&cu.transpose());
        let mut d = DMatrix::zeros(2, 1);
        d[(1, 0)] = du;
        Ok(StateSpaceMatrices { a, b, c, d })
    }

    /// State assembled from known histories, all most recent first.
    /// `e_int_prev` is ignored without an integrator.
    pub fn compose_state(
        &self,
        x_m: &DVector<f64>,
        u_past: &[f64],
        e_past: &[f64],
        e_int_prev: f64,
    ) -> Result<DVector<f64>, RealizationError> {
        let l = &self.layout;
        if x_m.len() != l.x_m.len() || u_past.len() < l.u_past.len() || e_past.len() < l.e_past.len() {
            return Err(RealizationError::Shape("history shorter than the state layout".into()));
        }
        let mut xi = DVector::zeros(l.dim);
        xi.rows_mut(l.x_m.start, l.x_m.len()).copy_from(x_m);
        for i in 0..l.u_past.len() {
            xi[l.u_past.start + i] = u_past[i];
        }
        for i in 0..l.e_past.len() {
            xi[l.e_past.start + i] = e_past[i];
        }
        if let Some(ii) = l.integrator {
            xi[ii] = e_int_prev;
        }
        Ok(xi)
    }

    /// Runs the realization from `xi0` along `g` with scheduling vectors
    /// `p_vectors[t]`; returns the `y` and `u` outputs.
    pub fn simulate(
        &self,
        xi0: &DVector<f64>,
        g: &[f64],
        p_vectors: &[Vec<f64>],
    ) -> Result<(Vec<f64>, Vec<f64>), RealizationError> {
        if g.len() != p_vectors.len() {
            return Err(RealizationError::Shape("g and p_vectors lengths differ".into()));
        }
        let mut xi = xi0.clone();
        let mut y = Vec::with_capacity(g.len());
        let mut u = Vec::with_capacity(g.len());
        for (&gk, pv) in g.iter().zip(p_vectors) {
            let m = self.evaluate_at(pv)?;
            let out = &m.c * &xi + &m.d * gk;
            y.push(out[0]);
            u.push(out[1]);
            xi = &m.a * &xi + &m.b * gk;
        }
        Ok((y, u))
    }
}

/// Lagged scheduling vectors `[p(t), .., p(t-L)]` for every `t`, with zeros
/// before the start of the record (matching a zero-initialized controller).
pub fn lagged_p_vectors(p: &[f64], max_lag: usize) -> Vec<Vec<f64>> {
    (0..p.len())
        .map(|t| (0..=max_lag).map(|l| if l > t { 0.0 } else { p[t - l] }).collect())
        .collect()
}

/// On-disk form: the controller file plus the layout for reference.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentedFile {
    pub layout: StateLayout,
    pub controller: ControllerFile,
}

impl From<&AugmentedModel> for AugmentedFile {
    fn from(m: &AugmentedModel) -> Self {
        AugmentedFile {
            layout: m.layout.clone(),
            controller: ControllerFile::from(&m.controller),
        }
    }
}

impl TryFrom<AugmentedFile> for AugmentedModel {
    type Error = RealizationError;

    fn try_from(f: AugmentedFile) -> Result<Self, RealizationError> {
        let controller = InnerControllerModel::try_from(f.controller)?;
        let model = build_augmented(&controller.reference_model.clone(), &controller)?;
        if model.layout != f.layout {
            return Err(RealizationError::Config("stored layout does not match the controller".into()));
        }
        Ok(model)
    }
}
