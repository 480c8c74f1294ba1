//! The dense active-set solver on a small box- and row-constrained problem,
//! cold and warm started.

use lpvdd::qp::{solve, solve_with, QpOptions, QpProblem};
use nalgebra::{dmatrix, dvector, DVector};
use std::error::Error;

fn main() -> Result<(), Box<dyn Error>> {
    // min (z1 - 3)^2 + (z2 - 2)^2 + z1 z2  s.t. z1 + z2 <= 2, -1 <= z <= 1.5
    let p = QpProblem {
        h: dmatrix![2.0, 1.0; 1.0, 2.0],
        f: dvector![-6.0, -4.0],
        a_in: dmatrix![1.0, 1.0],
        b_in: dvector![2.0],
        lb: Some(DVector::from_element(2, -1.0)),
        ub: Some(DVector::from_element(2, 1.5)),
    };
    let cold = solve(&p, 1e-10, 100)?;
    println!("status     {:?}", cold.status);
    println!("z          {:?}", cold.z.as_slice());
    println!("objective  {:.6}", cold.objective);
    println!("active     {:?}", cold.active_set);
    println!("multipliers {:?}", cold.multipliers.as_slice());
    println!("kkt        {:.1e}", cold.kkt_residual);
    println!("iterations {}", cold.iterations);

    let warm = solve_with(&p, QpOptions { tol: 1e-10, max_iter: 100 }, Some(&cold.active_set))?;
    println!("warm start: {} iterations, same z: {}", warm.iterations, (&warm.z - &cold.z).amax() < 1e-12);
    Ok(())
}
