mod common;

use common::{enumerate, gaussian, motor_structure_controller, pi_controller, rc_kernel_controller};
use lpvdd::mpc::{build_prediction, build_step_qp, MpcConfig, MpcController, PredictionMode};
use lpvdd::qp::{solve, QpProblem, QpStatus};
use lpvdd::realization::{build_augmented, AugmentedModel};
use lpvdd::signals::BoundSet;
use nalgebra::DVector;
use proptest::prelude::*;

fn pi_aug() -> AugmentedModel {
    let c = pi_controller();
    build_augmented(&c.reference_model, &c).unwrap()
}

/// The step QP with the slack column and its sign row removed.
fn hard_version(soft: &QpProblem, nu: usize) -> QpProblem {
    let rows = soft.a_in.nrows() - 1;
    QpProblem {
        h: soft.h.view((0, 0), (nu, nu)).into_owned(),
        f: soft.f.rows(0, nu).into_owned(),
        a_in: soft.a_in.view((0, 0), (rows, nu)).into_owned(),
        b_in: soft.b_in.rows(0, rows).into_owned(),
        lb: None,
        ub: None,
    }
}

fn toy_config() -> MpcConfig {
    MpcConfig {
        np: 3,
        nu: 2,
        q_y: 1.0,
        q_du: 0.1,
        q_g: 0.1,
        bounds: BoundSet {
            y_max: 1.0,
            du_min: -0.5,
            du_max: 0.5,
            ..BoundSet::unbounded()
        },
        ..MpcConfig::default()
    }
}

/// The slack carries only the quadratic penalty, so an active constraint
/// leaves a slack of order `1 / q_eps`; the check uses a stiff penalty.
#[test]
fn soft_solution_meets_hard_constraints_when_they_are_feasible() {
    let aug = pi_aug();
    let cfg = MpcConfig {
        q_eps: 1e8,
        ..toy_config()
    };
    let mut checked = 0;
    for seed in 0..60 {
        let xi = DVector::from_vec(gaussian(3, 0.3, seed));
        let r = gaussian(1, 1.0, seed + 100)[0] + 0.8;
        let u_prev = gaussian(1, 0.3, seed + 200)[0];
        let soft = build_step_qp(&aug, &cfg, &xi, &[r], &[vec![0.0]], u_prev, None).unwrap();
        let hard = hard_version(&soft, cfg.nu);
        if enumerate(&hard).is_none() {
            continue;
        }
        checked += 1;
        let sol = solve(&soft, 1e-10, 100).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        let z = sol.z.rows(0, cfg.nu).into_owned();
        let worst = (&hard.a_in * &z - &hard.b_in).max();
        assert!(worst <= 1e-6, "seed {seed}: hard violation {worst:e}");
        assert!(sol.z[cfg.nu] <= 1e-6, "seed {seed}: eps {:e}", sol.z[cfg.nu]);
    }
    assert!(checked >= 20, "only {checked} feasible cases");
}

#[test]
fn slack_shrinks_inversely_with_its_weight() {
    let aug = pi_aug();
    let xi = DVector::from_vec(vec![0.9, 0.0, 0.0]);
    let eps = |q_eps: f64| {
        let cfg = MpcConfig { q_eps, ..toy_config() };
        let qp = build_step_qp(&aug, &cfg, &xi, &[1.5], &[vec![0.0]], 0.0, None).unwrap();
        solve(&qp, 1e-12, 100).unwrap().z[cfg.nu]
    };
    let (a, b) = (eps(1e5), eps(1e7));
    assert!(a > 0.0);
    assert!((a / b - 100.0).abs() < 1.0, "{a:e} {b:e}");
}

#[test]
fn blocking_holds_moves_beyond_the_control_horizon() {
    let aug = pi_aug();
    let cfg = MpcConfig {
        np: 6,
        nu: 2,
        ..MpcConfig::default()
    };
    let stack = build_prediction(&aug, &cfg, &DVector::zeros(3), &[vec![0.0]]).unwrap();
    assert_eq!(stack.blocking.shape(), (6, 2));
    let moves = &stack.blocking * DVector::from_vec(vec![0.7, -1.3]);
    assert_eq!(moves[0], 0.7);
    assert!(moves.iter().skip(1).all(|&g| g == -1.3));
    let qp = build_step_qp(&aug, &cfg, &DVector::zeros(3), &[1.0], &[vec![0.0]], 0.0, None).unwrap();
    assert_eq!(qp.n_vars(), 3);
}

#[test]
fn free_response_matches_open_simulation() {
    let ctrl = rc_kernel_controller();
    let aug = build_augmented(&ctrl.reference_model, &ctrl).unwrap();
    let cfg = MpcConfig {
        np: 8,
        nu: 8,
        ..MpcConfig::default()
    };
    let xi = DVector::from_vec(gaussian(4, 1.0, 1));
    let sched: Vec<Vec<f64>> = (0..9).map(|k| vec![f64::from(u8::from(k % 3 == 0)), f64::from(u8::from(k % 3 == 1))]).collect();
    let stack = build_prediction(&aug, &cfg, &xi, &sched).unwrap();
    let (y, u) = aug.simulate(&xi, &[0.0; 9], &sched).unwrap();
    for k in 0..8 {
        assert!((stack.y_free[k] - y[k + 1]).abs() < 1e-12);
        assert!((stack.u_free[k] - u[k]).abs() < 1e-12);
    }
}

#[test]
fn lpv_mode_equals_ltv_mode_under_constant_scheduling() {
    for ctrl in [rc_kernel_controller(), motor_structure_controller()] {
        let aug = build_augmented(&ctrl.reference_model, &ctrl).unwrap();
        let pv = gaussian(aug.p_vector_len(), 1.0, 3);
        let xi = DVector::from_vec(gaussian(aug.state_dim(), 1.0, 4));
        let ltv = MpcConfig {
            bounds: BoundSet {
                du_min: -0.2,
                du_max: 0.2,
                ..BoundSet::unbounded()
            },
            ..MpcConfig::default()
        };
        let lpv = MpcConfig {
            mode: PredictionMode::Lpv,
            ..ltv.clone()
        };
        let a = build_step_qp(&aug, &ltv, &xi, &[1.0], &vec![pv.clone(); ltv.np + 1], 0.1, None).unwrap();
        let b = build_step_qp(&aug, &lpv, &xi, &[1.0], &[pv], 0.1, None).unwrap();
        let scale = 1.0 + a.h.amax();
        assert!((&a.h - &b.h).amax() <= 1e-12 * scale);
        assert!((&a.f - &b.f).amax() <= 1e-12 * (1.0 + a.f.amax()));
        assert!((&a.a_in - &b.a_in).amax() <= 1e-12 * (1.0 + a.a_in.amax()));
        assert!((&a.b_in - &b.b_in).amax() <= 1e-12 * (1.0 + a.b_in.amax()));
    }
}

#[test]
fn dominant_reference_weight_passes_the_reference_through() {
    let aug = pi_aug();
    let cfg = MpcConfig {
        np: 5,
        nu: 3,
        q_y: 0.0,
        q_g: 1e8,
        ..MpcConfig::default()
    };
    let r = [0.5, 1.0, 1.5, 2.0, 2.5];
    let qp = build_step_qp(&aug, &cfg, &DVector::from_vec(vec![0.2, -0.1, 0.4]), &r, &[vec![0.0]], 0.0, None).unwrap();
    let sol = solve(&qp, 1e-12, 100).unwrap();
    for j in 0..3 {
        assert!((sol.z[j] - r[j]).abs() < 1e-6);
    }
    assert_eq!(sol.z[3], 0.0);
}

#[test]
fn motor_tuning_has_eleven_decisions() {
    let ctrl = motor_structure_controller();
    let aug = build_augmented(&ctrl.reference_model, &ctrl).unwrap();
    let cfg = MpcConfig::dc_motor();
    let qp = build_step_qp(&aug, &cfg, &DVector::zeros(10), &[1.0], &[vec![0.0; 5]], 0.0, None).unwrap();
    assert_eq!(qp.n_vars(), 11);
    // twenty rate rows plus the slack sign row
    assert_eq!(qp.a_in.nrows(), 21);
}

#[test]
fn steady_state_keeps_the_reference() {
    // y = 1, zero error history and a settled input
    let aug = pi_aug();
    let xi = DVector::from_vec(vec![1.0, 5.0, 0.0]);
    let mut mpc = MpcController::new(&aug, toy_config_unbounded()).unwrap();
    let (g, d) = mpc.step(&xi, &[1.0; 4], &[vec![0.0]], 5.0, None).unwrap();
    assert!((g - 1.0).abs() < 1e-9, "g = {g}");
    assert_eq!(d.eps, 0.0);
    assert!((d.u_pred - 5.0).abs() < 1e-9);
}

fn toy_config_unbounded() -> MpcConfig {
    MpcConfig {
        bounds: BoundSet::unbounded(),
        ..toy_config()
    }
}

#[test]
fn predicted_rate_respects_the_softened_bound() {
    let aug = pi_aug();
    let cfg = MpcConfig {
        np: 4,
        nu: 4,
        q_y: 10.0,
        bounds: BoundSet {
            du_min: -0.2,
            du_max: 0.2,
            ..BoundSet::unbounded()
        },
        ..MpcConfig::default()
    };
    let xi = DVector::zeros(3);
    let stack = build_prediction(&aug, &cfg, &xi, &[vec![0.0]]).unwrap();
    let qp = build_step_qp(&aug, &cfg, &xi, &[1.0], &[vec![0.0]], 0.0, None).unwrap();
    let sol = solve(&qp, 1e-12, 100).unwrap();
    let moves = &stack.blocking * sol.z.rows(0, 4);
    let u = &stack.u_free + &stack.s_u * moves;
    let eps = sol.z[4];
    let mut prev = 0.0;
    for k in 0..4 {
        assert!((u[k] - prev).abs() <= 0.2 + eps * cfg.v_du + 1e-9);
        prev = u[k];
    }
    assert!(qp.a_in.nrows() > 1);
}

#[test]
fn first_move_varies_continuously_with_an_output_bound() {
    let aug = pi_aug();
    let xi = DVector::from_vec(vec![0.2, 0.0, 0.0]);
    let first_move = |y_max: f64| {
        let cfg = MpcConfig {
            np: 5,
            nu: 3,
            q_y: 1.0,
            q_g: 0.1,
            bounds: BoundSet {
                y_max,
                ..BoundSet::unbounded()
            },
            ..MpcConfig::default()
        };
        let qp = build_step_qp(&aug, &cfg, &xi, &[2.0], &[vec![0.0]], 0.0, None).unwrap();
        solve(&qp, 1e-12, 200).unwrap().z[0]
    };
    let sweep = |step: f64| {
        let n = (1.5 / step).round() as usize;
        (0..n)
            .map(|i| {
                let b = 2.5 - i as f64 * step;
                (first_move(b) - first_move(b - step)).abs() / step
            })
            .fold(0.0, f64::max)
    };
    let coarse = sweep(0.05);
    let fine = sweep(0.005);
    assert!(coarse > 0.0);
    assert!(fine <= 2.0 * coarse + 1e-9, "slope {fine} vs {coarse}");
}

proptest! {
    #[test]
    fn slack_is_zero_without_bounds(seed in 0u64..10_000, q_eps in 1e-3f64..1e6) {
        let aug = pi_aug();
        let cfg = MpcConfig { q_eps, ..toy_config_unbounded() };
        let xi = DVector::from_vec(gaussian(3, 1.0, seed));
        let qp = build_step_qp(&aug, &cfg, &xi, &gaussian(3, 1.0, seed + 1), &[vec![0.0]], 0.3, None).unwrap();
        let sol = solve(&qp, 1e-12, 100).unwrap();
        prop_assert_eq!(sol.z[cfg.nu], 0.0);
    }

    #[test]
    fn zero_moves_give_the_free_response(seed in 0u64..10_000) {
        let aug = pi_aug();
        let cfg = toy_config();
        let xi = DVector::from_vec(gaussian(3, 1.0, seed));
        let stack = build_prediction(&aug, &cfg, &xi, &[vec![0.0]]).unwrap();
        let (y, u) = aug.simulate(&xi, &[0.0; 4], &vec![vec![0.0]; 4]).unwrap();
        for k in 0..3 {
            prop_assert!((stack.y_free[k] - y[k + 1]).abs() < 1e-12);
            prop_assert!((stack.u_free[k] - u[k]).abs() < 1e-12);
        }
    }
}
