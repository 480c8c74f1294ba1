mod common;

use common::{gaussian, motor_structure_controller, pi_controller, pi_reference, rc_kernel_controller};
use lpvdd::inner_synth::{FixedPart, InnerControllerModel};
use lpvdd::realization::{build_augmented, lagged_p_vectors, AugmentedFile, AugmentedModel};
use lpvdd::refmodel::LpvStateSpace;
use nalgebra::DVector;
use proptest::prelude::*;
use std::sync::OnceLock;

/// Reference model output fed back through the controller, sample by sample.
fn cascade(ctrl: &InnerControllerModel, m: &LpvStateSpace, g: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut x = DVector::zeros(m.n_x());
    let mut hist = ctrl.initial_history();
    let (mut ys, mut us) = (Vec::new(), Vec::new());
    for (&gk, &pk) in g.iter().zip(p) {
        let mats = m.evaluate(pk);
        let y = (&mats.c * &x)[0];
        ys.push(y);
        us.push(ctrl.controller_step(&mut hist, gk, y, pk));
        x = &mats.a * &x + &mats.b * gk;
    }
    (ys, us)
}

fn fixtures() -> Vec<(&'static str, InnerControllerModel)> {
    let eq14 = LpvStateSpace::unit_gain_first_order(0.99);
    let pi_on_eq14 = InnerControllerModel::constant(&[-1.0], &[2.0, -1.8], FixedPart::Identity, eq14).unwrap();
    vec![
        ("lti pi", pi_controller()),
        ("pi on slow model", pi_on_eq14),
        ("rc kernel", rc_kernel_controller()),
        ("motor structure", motor_structure_controller()),
    ]
}

fn augmented(ctrl: &InnerControllerModel) -> AugmentedModel {
    build_augmented(&ctrl.reference_model, ctrl).unwrap()
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / (1.0 + y.abs())).fold(0.0, f64::max)
}

#[test]
fn realization_reproduces_the_cascade_on_every_fixture() {
    for (name, ctrl) in fixtures() {
        let aug = augmented(&ctrl);
        let lag = ctrl.structure.max_scheduling_lag();
        for seed in 0..20 {
            let g = gaussian(100, 1.0, seed);
            let p: Vec<f64> = gaussian(100, 1.0, seed + 500);
            let (y_ref, u_ref) = cascade(&ctrl, &ctrl.reference_model, &g, &p);
            let xi0 = DVector::zeros(aug.state_dim());
            let (y, u) = aug.simulate(&xi0, &g, &lagged_p_vectors(&p, lag)).unwrap();
            assert!(max_gap(&y, &y_ref) < 1e-10, "{name} y seed {seed}");
            assert!(max_gap(&u, &u_ref) < 1e-10, "{name} u seed {seed}");
        }
    }
}

#[test]
fn state_dimension_follows_the_layout_rule() {
    let dims: Vec<usize> = fixtures().iter().map(|(_, c)| augmented(c).state_dim()).collect();
    assert_eq!(dims, vec![3, 3, 4, 10]);
}

#[test]
fn y_row_has_no_feedthrough_anywhere() {
    for (_, ctrl) in fixtures() {
        let aug = augmented(&ctrl);
        for seed in 0..10 {
            let pv = gaussian(aug.p_vector_len(), 1.0, seed);
            let m = aug.evaluate_at(&pv).unwrap();
            assert_eq!(m.d[(0, 0)], 0.0);
            let b0 = ctrl.coefficients(&ctrl.scheduling_vector(pv[0], &pv[1..])).b[0];
            assert!((m.d[(1, 0)] - b0).abs() < 1e-12);
        }
        // impulse in g: y is zero at lag zero
        let n = 5;
        let mut g = vec![0.0; n];
        g[0] = 1.0;
        let (y, _) = aug
            .simulate(&DVector::zeros(aug.state_dim()), &g, &vec![vec![0.0; aug.p_vector_len()]; n])
            .unwrap();
        assert_eq!(y[0], 0.0);
        assert!(y[1] != 0.0);
    }
}

#[test]
fn lti_parts_give_scheduling_independent_matrices() {
    let aug = augmented(&pi_controller());
    assert!(aug.is_lti());
    assert_eq!(aug.evaluate_at(&[0.0]).unwrap(), aug.evaluate_at(&[7.5]).unwrap());
}

#[test]
fn scheduling_only_moves_controller_entries() {
    for ctrl in [rc_kernel_controller(), motor_structure_controller()] {
        let aug = augmented(&ctrl);
        let row = aug.layout().u_past.start;
        let a = aug.evaluate_at(&gaussian(aug.p_vector_len(), 1.0, 1)).unwrap();
        let b = aug.evaluate_at(&gaussian(aug.p_vector_len(), 1.0, 2)).unwrap();
        let mut moved = 0;
        for i in 0..aug.state_dim() {
            for j in 0..aug.state_dim() {
                if a.a[(i, j)] != b.a[(i, j)] {
                    assert_eq!(i, row, "A({i},{j}) moved");
                    moved += 1;
                }
            }
            if a.b[(i, 0)] != b.b[(i, 0)] {
                assert_eq!(i, row);
            }
            assert_eq!(a.c[(0, i)], b.c[(0, i)]);
        }
        assert!(moved > 0);
        assert_ne!(a.d[(1, 0)], b.d[(1, 0)]);
    }
}

#[test]
fn frozen_eigenvalues_lie_in_the_closed_unit_disk() {
    // the PI controller contributes its integrating pole at exactly one
    let eq14 = LpvStateSpace::unit_gain_first_order(0.99);
    let ctrl = InnerControllerModel::constant(&[-1.0], &[2.0, -1.8], FixedPart::Identity, eq14.clone()).unwrap();
    let a = build_augmented(&eq14, &ctrl).unwrap().evaluate_at(&[0.0]).unwrap().a;
    let eig = a.complex_eigenvalues();
    assert!(eig.iter().all(|l| l.norm() <= 1.0 + 1e-12), "{eig}");
    let mut mags: Vec<f64> = eig.iter().map(|l| l.norm()).collect();
    mags.sort_by(f64::total_cmp);
    assert!((mags[2] - 1.0).abs() < 1e-12 && (mags[1] - 0.99).abs() < 1e-12 && mags[0] < 1e-12);
}

#[test]
fn step_through_the_matched_pi_loop() {
    // y is the reference model step; u follows the PI recursion on e = 1 - y
    let aug = augmented(&pi_controller());
    let n = 40;
    let (y, u) = aug.simulate(&DVector::zeros(3), &vec![1.0; n], &vec![vec![0.0]; n]).unwrap();
    let mut u_prev = 0.0;
    let mut e_prev = 0.0;
    for k in 0..n {
        let yk = 1.0 - 0.8f64.powi(k as i32);
        assert!((y[k] - yk).abs() < 1e-12);
        let e = 1.0 - yk;
        let uk = u_prev + 2.0 * e - 1.8 * e_prev;
        assert!((u[k] - uk).abs() < 1e-12);
        u_prev = uk;
        e_prev = e;
    }
    assert_eq!(aug.reference(), &pi_reference());
}

#[test]
fn augmented_file_round_trip() {
    let aug = augmented(&motor_structure_controller());
    let text = toml::to_string(&AugmentedFile::from(&aug)).unwrap();
    let back = AugmentedModel::try_from(toml::from_str::<AugmentedFile>(&text).unwrap()).unwrap();
    let pv = gaussian(5, 1.0, 3);
    assert_eq!(back.evaluate_at(&pv).unwrap(), aug.evaluate_at(&pv).unwrap());
}

proptest! {
    #[test]
    fn cascade_equivalence_for_random_trajectories(seed in 0u64..10_000) {
        static RC: OnceLock<InnerControllerModel> = OnceLock::new();
        let ctrl = RC.get_or_init(rc_kernel_controller);
        let aug = augmented(ctrl);
        let g = gaussian(100, 2.0, seed);
        let p: Vec<f64> = gaussian(100, 1.0, seed + 1).iter().map(|v| if *v > 0.0 { 1.0 } else { 0.0 }).collect();
        let (y_ref, u_ref) = cascade(ctrl, &ctrl.reference_model, &g, &p);
        let (y, u) = aug.simulate(&DVector::zeros(aug.state_dim()), &g, &lagged_p_vectors(&p, 1)).unwrap();
        prop_assert!(max_gap(&y, &y_ref) < 1e-10);
        prop_assert!(max_gap(&u, &u_ref) < 1e-10);
    }
}
