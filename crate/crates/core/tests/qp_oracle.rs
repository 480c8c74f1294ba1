//! The active-set solver against exhaustive enumeration of active sets.

mod common;

use common::enumerate;
use lpvdd::qp::{solve, solve_with, QpOptions, QpProblem, QpStatus};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_qp(rng: &mut ChaCha8Rng) -> QpProblem {
    let n = rng.random_range(1..=8);
    let m = rng.random_range(0..=12);
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let f = DVector::from_fn(n, |_, _| rng.random_range(-5.0..5.0));
    let a_in = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    // feasible by construction around a random point
    let z0 = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
    let b_in = DVector::from_fn(m, |i, _| a_in.row(i).transpose().dot(&z0) + rng.random_range(0.0..0.5));
    QpProblem {
        h,
        f,
        a_in,
        b_in,
        lb: None,
        ub: None,
    }
}

#[test]
fn fifty_random_problems_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..50 {
        let p = random_qp(&mut rng);
        let s = solve(&p, 1e-8, 200).unwrap();
        assert_eq!(s.status, QpStatus::Optimal, "problem {k}");
        let (z, obj) = enumerate(&p).expect("feasible by construction");
        assert!((s.objective - obj).abs() <= 1e-6, "problem {k}: {} vs {obj}", s.objective);
        assert!((&s.z - &z).amax() <= 1e-6, "problem {k}");
        assert!(s.kkt_residual <= 1e-8, "problem {k}: kkt {}", s.kkt_residual);
    }
}

#[test]
fn boxed_problems_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut p = random_qp(&mut rng);
        let n = p.n_vars();
        p.a_in = DMatrix::zeros(0, n);
        p.b_in = DVector::zeros(0);
        p.lb = Some(DVector::from_element(n, -0.3));
        p.ub = Some(DVector::from_element(n, 0.4));
        let s = solve(&p, 1e-8, 200).unwrap();
        let (z, _) = enumerate(&p).unwrap();
        assert!((&s.z - &z).amax() <= 1e-6);
    }
}

#[test]
fn degenerate_duplicate_rows() {
    // the same constraint twice plus a redundant one through the optimum
    let p = QpProblem {
        h: DMatrix::identity(2, 2) * 2.0,
        f: DVector::from_vec(vec![-2.0, -4.0]),
        a_in: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0]),
        b_in: DVector::from_vec(vec![1.0, 1.0, 2.0]),
        lb: None,
        ub: None,
    };
    let s = solve(&p, 1e-8, 200).unwrap();
    assert_eq!(s.status, QpStatus::Optimal);
    assert!((s.z[0] - 0.0).abs() < 1e-10 && (s.z[1] - 1.0).abs() < 1e-10);
    assert!(s.kkt_residual <= 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn kkt_conditions_hold(seed in any::<u64>()) {
        let p = random_qp(&mut ChaCha8Rng::seed_from_u64(seed));
        let s = solve(&p, 1e-8, 200).unwrap();
        prop_assert_eq!(s.status, QpStatus::Optimal);
        let (a, b) = p.stacked_constraints();
        let grad = &p.h * &s.z + &p.f + a.transpose() * &s.multipliers;
        let scale = 1.0f64.max(p.f.amax()).max((&p.h * &s.z).amax());
        prop_assert!(grad.amax() <= 1e-8 * scale);
        for i in 0..a.nrows() {
            let slack = a.row(i).transpose().dot(&s.z) - b[i];
            prop_assert!(s.multipliers[i] >= -1e-8);
            prop_assert!((s.multipliers[i] * slack).abs() <= 1e-8 * scale * (1.0 + b[i].abs()));
        }
    }

    #[test]
    fn scaling_leaves_solution_unchanged(seed in any::<u64>(), scale in 1e-3f64..1e3) {
        let p = random_qp(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut q = p.clone();
        q.h *= scale;
        q.f *= scale;
        let a = solve(&p, 1e-8, 200).unwrap();
        let b = solve(&q, 1e-8, 200).unwrap();
        prop_assert!((&a.z - &b.z).amax() <= 1e-7 * (1.0 + a.z.amax()));
    }

    #[test]
    fn warm_start_only_changes_iterations(seed in any::<u64>(), junk in proptest::collection::vec(0usize..20, 0..6)) {
        let p = random_qp(&mut ChaCha8Rng::seed_from_u64(seed));
        let cold = solve(&p, 1e-8, 200).unwrap();
        let opts = QpOptions::default();
        let warm = solve_with(&p, opts, Some(&cold.active_set)).unwrap();
        prop_assert!((&cold.z - &warm.z).amax() <= 1e-8 * (1.0 + cold.z.amax()));
        prop_assert!(warm.iterations <= cold.iterations);
        let noisy = solve_with(&p, opts, Some(&junk)).unwrap();
        prop_assert!((&cold.z - &noisy.z).amax() <= 1e-8 * (1.0 + cold.z.amax()));
    }
}
