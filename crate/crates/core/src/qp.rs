//! Dense strictly convex QP: `min 0.5 z'Hz + f'z  s.t.  A z <= b, lb <= z <= ub`.
//!
//! Dual active-set method in the style of Goldfarb and Idnani. It starts from
//! the unconstrained minimizer and adds violated constraints one at a time,
//! dropping active constraints whose multipliers would turn negative, so
//! every iterate is dual feasible. Each direction comes from the
//! equality-constrained subproblem on the working set, solved by the
//! null-space method with a full QR factorization of the active normals.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("Hessian is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("Hessian is not positive semidefinite (min eigenvalue {0:.3e})")]
    NotConvex(f64),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub lb: Option<DVector<f64>>,
    pub ub: Option<DVector<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub objective: f64,
    pub status: QpStatus,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Active constraint indices. Rows of `a_in` come first, then finite
    /// lower bounds, then finite upper bounds (see [`QpProblem::n_constraints`]).
    pub active_set: Vec<usize>,
    /// Multipliers of all constraints in the same order (zero when inactive).
    pub multipliers: DVector<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QpOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

const ASYMMETRY_TOL: f64 = 1e-10;
const CONVEXITY_TOL: f64 = 1e-8;
const REGULARIZATION: f64 = 1e-9;

impl QpProblem {
    /// Problem without inequality constraints or bounds.
    pub fn unconstrained(h: DMatrix<f64>, f: DVector<f64>) -> Self {
        let n = f.len();
        Self {
            h,
            f,
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lb: None,
            ub: None,
        }
    }

    pub fn n_vars(&self) -> usize {
        self.f.len()
    }

    fn check_shapes(&self) -> Result<(), QpError> {
        let n = self.n_vars();
        if self.h.shape() != (n, n) {
            return Err(QpError::Shape(format!("H is {:?}, expected {n}x{n}", self.h.shape())));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::Shape(format!(
                "A_in is {:?} with {} bounds for {n} variables",
                self.a_in.shape(),
                self.b_in.len()
            )));
        }
        for (name, v) in [("lb", &self.lb), ("ub", &self.ub)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(QpError::Shape(format!("{name} has {} entries, expected {n}", v.len())));
                }
            }
        }
        Ok(())
    }

    /// All constraints as rows `a_i' z <= b_i`: the inequality rows, then
    /// `-z_i <= -lb_i` for finite lower bounds, then `z_i <= ub_i` for finite
    /// upper bounds.
    pub fn stacked_constraints(&self) -> (DMatrix<f64>, DVector<f64>) {
        let n = self.n_vars();
        let mut rows: Vec<(DVector<f64>, f64)> = (0..self.a_in.nrows())
            .map(|i| (self.a_in.row(i).transpose(), self.b_in[i]))
            .collect();
        if let Some(lb) = &self.lb {
            for (i, &l) in lb.iter().enumerate() {
                if l.is_finite() {
                    let mut a = DVector::zeros(n);
                    a[i] = -1.0;
                    rows.push((a, -l));
                }
            }
        }
        if let Some(ub) = &self.ub {
            for (i, &u) in ub.iter().enumerate() {
                if u.is_finite() {
                    let mut a = DVector::zeros(n);
                    a[i] = 1.0;
                    rows.push((a, u));
                }
            }
        }
        let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
        let b = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        (a, b)
    }

    pub fn n_constraints(&self) -> usize {
        self.stacked_constraints().0.nrows()
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.f.dot(z)
    }

    /// Writes `block,row,col,value` lines for `H`, `f`, `A` and `b` (bounds
    /// folded into `A`, `b`).
    pub fn write_debug_csv<W: Write>(&self, mut out: W) -> Result<(), QpError> {
        let (a, b) = self.stacked_constraints();
        writeln!(out, "block,row,col,value")?;
        for i in 0..self.h.nrows() {
            for j in 0..self.h.ncols() {
                writeln!(out, "H,{i},{j},{}", self.h[(i, j)])?;
            }
        }
        for (i, v) in self.f.iter().enumerate() {
            writeln!(out, "f,{i},0,{v}")?;
        }
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                writeln!(out, "A,{i},{j},{}", a[(i, j)])?;
            }
        }
        for (i, v) in b.iter().enumerate() {
            writeln!(out, "b,{i},0,{v}")?;
        }
        Ok(())
    }
}

/// Checks symmetry and convexity of `H` and returns the matrix actually used,
/// lifted so its smallest eigenvalue is at least `1e-9`.
fn prepare_hessian(h: &DMatrix<f64>) -> Result<DMatrix<f64>, QpError> {
    let asym = (h - h.transpose()).abs().max();
    if asym > ASYMMETRY_TOL * (1.0 + h.abs().max()) {
        return Err(QpError::NotSymmetric(asym));
    }
    let sym = (h + h.transpose()) * 0.5;
    if sym.nrows() == 0 {
        return Ok(sym);
    }
    let min_eig = SymmetricEigen::new(sym.clone()).eigenvalues.min();
    let scale = sym.abs().max().max(1.0);
    if min_eig < -CONVEXITY_TOL * scale {
        return Err(QpError::NotConvex(min_eig));
    }
    if min_eig < REGULARIZATION {
        let shift = REGULARIZATION - min_eig.min(0.0);
        let mut out = sym;
        for i in 0..out.nrows() {
            out[(i, i)] += shift;
        }
        return Ok(out);
    }
    Ok(sym)
}

/// Null-space solve of the equality-constrained subproblem on the working
/// set: `H dz + A_W' dl = -r`, `A_W dz = 0`.
struct Subproblem {
    z_basis: DMatrix<f64>,
    y_basis: DMatrix<f64>,
    r: DMatrix<f64>,
    reduced: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
}

impl Subproblem {
    fn new(h: &DMatrix<f64>, a_w: &DMatrix<f64>) -> Result<Self, QpError> {
        let n = h.nrows();
        let w = a_w.nrows();
        // QR of [A_W' | I] yields a full orthogonal Q whose first w columns
        // span the active normals.
        let mut aug = DMatrix::zeros(n, w + n);
        aug.view_mut((0, 0), (n, w)).copy_from(&a_w.transpose());
        aug.view_mut((0, w), (n, n)).fill_with_identity();
        let qr = aug.qr();
        let q = qr.q();
        let r_full = qr.r();
        let y_basis = q.columns(0, w).into_owned();
        let z_basis = q.columns(w, n - w).into_owned();
        let r = r_full.view((0, 0), (w, w)).into_owned();
        let reduced = if n > w {
            let red = z_basis.transpose() * h * &z_basis;
            let red = (&red + red.transpose()) * 0.5;
            Some(
                red.cholesky()
                    .ok_or_else(|| QpError::Numerical("reduced Hessian is not positive definite".into()))?,
            )
        } else {
            None
        };
        Ok(Self {
            z_basis,
            y_basis,
            r,
            reduced,
        })
    }

    /// Step for the entering normal `a`: returns `(dz, dl)`.
    fn direction(&self, h: &DMatrix<f64>, a: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), QpError> {
        let n = h.nrows();
        let dz = match &self.reduced {
            Some(ch) => {
                let w = ch.solve(&(-(self.z_basis.transpose() * a)));
                &self.z_basis * w
            }
            None => DVector::zeros(n),
        };
        let dl = self.multipliers_for(&(h * &dz + a))?;
        Ok((dz, dl))
    }

    /// Solves `R l = -Y' g` for the multipliers balancing the gradient `g`.
    fn multipliers_for(&self, g: &DVector<f64>) -> Result<DVector<f64>, QpError> {
        if self.r.nrows() == 0 {
            return Ok(DVector::zeros(0));
        }
        let rhs = -(self.y_basis.transpose() * g);
        self.r
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| QpError::Numerical("working set is rank deficient".into()))
    }

    /// Tests whether `a` lies in the span of the working set.
    fn is_dependent(&self, a: &DVector<f64>) -> bool {
        let na = a.norm();
        na == 0.0 || (self.z_basis.transpose() * a).norm() <= 1e-12 * na
    }

    /// Exact solution of `min 0.5 z'Hz + f'z  s.t.  A_W z = b_W`.
    fn equality_solution(
        &self,
        h: &DMatrix<f64>,
        f: &DVector<f64>,
        b_w: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>), QpError> {
        let n = h.nrows();
        // particular solution in the range of A_W'
        let z0 = if self.r.nrows() > 0 {
            let t = self
                .r
                .transpose()
                .solve_lower_triangular(b_w)
                .ok_or_else(|| QpError::Numerical("working set is rank deficient".into()))?;
            &self.y_basis * t
        } else {
            DVector::zeros(n)
        };
        let z = match &self.reduced {
            Some(ch) => {
                let g = h * &z0 + f;
                let w = ch.solve(&(-(self.z_basis.transpose() * g)));
                &z0 + &self.z_basis * w
            }
            None => z0,
        };
        let lambda = self.multipliers_for(&(h * &z + f))?;
        Ok((z, lambda))
    }
}

/// KKT residual scaled by the problem magnitude: stationarity, primal and
/// dual feasibility, and complementarity.
fn kkt_residual(
    h: &DMatrix<f64>,
    f: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    z: &DVector<f64>,
    lambda: &DVector<f64>,
) -> f64 {
    let hz = h * z;
    let atl = a.transpose() * lambda;
    let scale = 1.0_f64
        .max(hz.amax())
        .max(f.amax())
        .max(atl.amax());
    let stat = (&hz + f + &atl).amax() / scale;
    let mut worst = stat;
    for i in 0..a.nrows() {
        let s = a.row(i).dot(&z.transpose()) - b[i];
        let row_scale = 1.0 + b[i].abs() + (a.row(i).abs() * z.abs())[0];
        worst = worst.max(s.max(0.0) / row_scale);
        worst = worst.max((-lambda[i]).max(0.0) / scale);
        worst = worst.max((lambda[i] * s).abs() / (scale * row_scale));
    }
    worst
}

/// Solves with the default options and no warm start.
pub fn solve(problem: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    solve_with(problem, QpOptions { tol, max_iter }, None)
}

/// Solves, optionally starting from a previous active set. Indices that are
/// out of range, linearly dependent, or carry negative multipliers are
/// discarded before iterating, so the warm start never changes the solution.
pub fn solve_with(problem: &QpProblem, opts: QpOptions, warm_start: Option<&[usize]>) -> Result<QpSolution, QpError> {
    problem.check_shapes()?;
    let h = prepare_hessian(&problem.h)?;
    let f = &problem.f;
    let n = problem.n_vars();
    let (a, b) = problem.stacked_constraints();
    let m = a.nrows();
    let row = |i: usize| a.row(i).transpose();
    let viol_scale = |i: usize, z: &DVector<f64>| 1.0 + b[i].abs() + (a.row(i).abs() * z.abs())[0];

    let mut active: Vec<usize> = Vec::new();
    let mut lam_active: Vec<f64> = Vec::new();
    let mut sub = Subproblem::new(&h, &DMatrix::zeros(0, n))?;
    let (mut z, _) = sub.equality_solution(&h, f, &DVector::zeros(0))?;

    if let Some(ws) = warm_start {
        let mut cand: Vec<usize> = Vec::new();
        for &i in ws {
            if i >= m || cand.contains(&i) {
                continue;
            }
            let trial = Subproblem::new(&h, &a.select_rows(cand.iter()))?;
            if !trial.is_dependent(&row(i)) {
                cand.push(i);
            }
        }
        loop {
            let s = Subproblem::new(&h, &a.select_rows(cand.iter()))?;
            let bw = b.select_rows(cand.iter());
            let (zw, lw) = s.equality_solution(&h, f, &bw)?;
            match lw.iter().enumerate().filter(|(_, l)| **l < 0.0).min_by(|x, y| x.1.total_cmp(y.1)) {
                Some((k, _)) => {
                    cand.remove(k);
                }
                None => {
                    z = zw;
                    lam_active = lw.iter().copied().collect();
                    active = cand;
                    sub = s;
                    break;
                }
            }
        }
    }

    let mut iterations = 0;
    let mut status = QpStatus::Optimal;
    let mut best_obj = problem_objective(&h, f, &z);
    let mut stall = 0usize;
    let mut bland = false;
    // constraint currently being added, with its accumulated multiplier
    let mut entering: Option<(usize, f64)> = None;

    'outer: loop {
        let (j, mut t_j) = match entering {
            Some(e) => e,
            None => {
                let mut pick: Option<(usize, f64)> = None;
                for i in 0..m {
                    if active.contains(&i) {
                        continue;
                    }
                    let s = (row(i).dot(&z) - b[i]) / viol_scale(i, &z);
                    if s > opts.tol {
                        let better = match pick {
                            None => true,
                            Some((_, best)) => !bland && s > best,
                        };
                        if better {
                            pick = Some((i, s));
                        }
                    }
                }
                match pick {
                    None => break 'outer,
                    Some((i, _)) => (i, 0.0),
                }
            }
        };
        if iterations >= opts.max_iter {
            status = QpStatus::MaxIterations;
            break;
        }
        iterations += 1;
        let aj = row(j);
        let (dz, dl) = sub.direction(&h, &aj)?;
        // partial step limited by active multipliers reaching zero
        let mut t_p = f64::INFINITY;
        let mut block: Option<usize> = None;
        for (k, (&lk, &dk)) in lam_active.iter().zip(dl.iter()).enumerate() {
            if dk < 0.0 {
                let t = lk / -dk;
                if t < t_p {
                    t_p = t;
                    block = Some(k);
                }
            }
        }
        let dependent = sub.is_dependent(&aj);
        if dependent {
            let Some(k) = block else {
                status = QpStatus::Infeasible;
                break;
            };
            for (l, d) in lam_active.iter_mut().zip(dl.iter()) {
                *l += t_p * d;
            }
            t_j += t_p;
            active.remove(k);
            lam_active.remove(k);
            sub = Subproblem::new(&h, &a.select_rows(active.iter()))?;
            entering = Some((j, t_j));
            continue;
        }
        let curv = dz.dot(&(&h * &dz));
        let s_j = aj.dot(&z) - b[j];
        let t_f = if curv > 0.0 { s_j / curv } else { f64::INFINITY };
        let t = t_f.min(t_p);
        z += &dz * t;
        for (l, d) in lam_active.iter_mut().zip(dl.iter()) {
            *l += t * d;
        }
        t_j += t;
        if t_f <= t_p {
            active.push(j);
            lam_active.push(t_j);
            entering = None;
        } else {
            let k = block.expect("finite partial step has a blocking constraint");
            active.remove(k);
            lam_active.remove(k);
            entering = Some((j, t_j));
        }
        sub = Subproblem::new(&h, &a.select_rows(active.iter()))?;

        let obj = problem_objective(&h, f, &z);
        if obj > best_obj + 1e-14 * best_obj.abs().max(1.0) {
            best_obj = obj;
            stall = 0;
        } else {
            stall += 1;
            if stall >= 3 * n.max(1) && !bland {
                log::debug!("qp: switching to lowest-index entering rule");
                bland = true;
            }
        }
    }

    // Polish on the final working set to remove accumulated rounding.
    if status == QpStatus::Optimal && !active.is_empty() {
        let bw = b.select_rows(active.iter());
        let (zp, lp) = sub.equality_solution(&h, f, &bw)?;
        let feasible = (0..m).all(|i| (row(i).dot(&zp) - b[i]) / viol_scale(i, &zp) <= opts.tol);
        if feasible && lp.iter().all(|&l| l >= -opts.tol) {
            z = zp;
            lam_active = lp.iter().map(|&l| l.max(0.0)).collect();
        }
    }

    let mut multipliers = DVector::zeros(m);
    for (&i, &l) in active.iter().zip(&lam_active) {
        multipliers[i] = l;
    }
    let kkt = kkt_residual(&h, f, &a, &b, &z, &multipliers);
    if status == QpStatus::Optimal && kkt > opts.tol {
        log::warn!("qp: KKT residual {kkt:.3e} above tolerance {:.1e}", opts.tol);
    }
    let mut active_set = active;
    active_set.sort_unstable();
    Ok(QpSolution {
        objective: problem.objective(&z),
        z,
        status,
        iterations,
        kkt_residual: kkt,
        active_set,
        multipliers,
    })
}

fn problem_objective(h: &DMatrix<f64>, f: &DVector<f64>, z: &DVector<f64>) -> f64 {
    0.5 * z.dot(&(h * z)) + f.dot(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn projected_optimum() {
        let p = QpProblem {
            h: DMatrix::identity(2, 2) * 2.0,
            f: DVector::from_vec(vec![-2.0, -4.0]),
            a_in: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b_in: DVector::from_vec(vec![1.0]),
            lb: None,
            ub: None,
        };
        let s = solve(&p, 1e-8, 200).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.z[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.objective, -3.0, epsilon = 1e-12);
        assert_eq!(s.active_set, vec![0]);
        assert_abs_diff_eq!(s.multipliers[0], 2.0, epsilon = 1e-12);
        assert!(s.kkt_residual <= 1e-8);
    }

    #[test]
    fn unconstrained_minimum() {
        let c = DVector::from_vec(vec![1.5, -2.0, 0.25]);
        let p = QpProblem::unconstrained(DMatrix::identity(3, 3), -c.clone());
        let s = solve(&p, 1e-8, 200).unwrap();
        assert_eq!(s.iterations, 0);
        assert_abs_diff_eq!((s.z - c).amax(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn bounds_become_constraints() {
        let mut p = QpProblem::unconstrained(DMatrix::identity(2, 2), DVector::from_vec(vec![-3.0, 3.0]));
        p.lb = Some(DVector::from_vec(vec![f64::NEG_INFINITY, -1.0]));
        p.ub = Some(DVector::from_vec(vec![2.0, f64::INFINITY]));
        assert_eq!(p.n_constraints(), 2);
        let s = solve(&p, 1e-8, 200).unwrap();
        assert_abs_diff_eq!(s.z[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(s.z[1], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn infeasible_detected() {
        // z <= 0 and -z <= -1
        let p = QpProblem {
            h: DMatrix::identity(1, 1),
            f: DVector::zeros(1),
            a_in: DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            b_in: DVector::from_vec(vec![0.0, -1.0]),
            lb: None,
            ub: None,
        };
        assert_eq!(solve(&p, 1e-8, 200).unwrap().status, QpStatus::Infeasible);
    }

    #[test]
    fn rejects_bad_hessians() {
        let asym = QpProblem::unconstrained(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]), DVector::zeros(2));
        assert!(matches!(solve(&asym, 1e-8, 10), Err(QpError::NotSymmetric(_))));
        let indef = QpProblem::unconstrained(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]), DVector::zeros(2));
        assert!(matches!(solve(&indef, 1e-8, 10), Err(QpError::NotConvex(_))));
        let shape = QpProblem::unconstrained(DMatrix::identity(3, 3), DVector::zeros(2));
        assert!(matches!(solve(&shape, 1e-8, 10), Err(QpError::Shape(_))));
    }

    #[test]
    fn semidefinite_hessian_is_regularized() {
        // H = diag(1, 0) with z_2 boxed
        let mut p = QpProblem::unconstrained(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])), DVector::from_vec(vec![-1.0, -1.0]));
        p.ub = Some(DVector::from_vec(vec![f64::INFINITY, 2.0]));
        let s = solve(&p, 1e-8, 200).unwrap();
        assert_eq!(s.status, QpStatus::Optimal);
        assert_abs_diff_eq!(s.z[0], 1.0, epsilon = 1e-6);
        assert_abs_diff_eq!(s.z[1], 2.0, epsilon = 1e-9);
    }

    #[test]
    fn max_iterations_reported() {
        let p = QpProblem {
            h: DMatrix::identity(2, 2),
            f: DVector::from_vec(vec![-5.0, -5.0]),
            a_in: DMatrix::identity(2, 2),
            b_in: DVector::from_vec(vec![0.0, 0.0]),
            lb: None,
            ub: None,
        };
        assert_eq!(solve(&p, 1e-8, 1).unwrap().status, QpStatus::MaxIterations);
    }

    #[test]
    fn debug_dump_lists_every_entry() {
        let p = QpProblem {
            h: DMatrix::identity(2, 2),
            f: DVector::zeros(2),
            a_in: DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            b_in: DVector::from_vec(vec![1.0]),
            lb: None,
            ub: None,
        };
        let mut buf = Vec::new();
        p.write_debug_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 4 + 2 + 2 + 1);
        assert!(text.contains("A,0,1,1"));
    }
}
