mod common;

use common::{gaussian, ls_iv_mean_errors, lti_log, pi_reference, pi_structure, signal, Lti, PI_TRUTH};
use lpvdd::inner_synth::{
    build_kernel_features, build_regression, cross_validate, fit_iv, fit_ls, identify, residuals, CoefficientModel,
    ControllerFile, FixedPart, InnerControllerModel,
};
use lpvdd::plant_lab::Plant;
use lpvdd::signals::ExperimentLog;
use proptest::prelude::*;

#[test]
fn noiseless_lti_data_recovers_the_matching_controller() {
    let log = lti_log(1000, 0.0, 1, 0);
    let (ctrl, report) = identify(&log, None, &pi_structure(1e9), &pi_reference()).unwrap();
    let c = ctrl.coefficients(&[]);
    for (got, want) in [c.a[0], c.b[0], c.b[1]].iter().zip(PI_TRUTH) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
    assert!(report.residual_rms < 1e-6);
    assert!(!report.instrumental);
}

#[test]
fn iv_beats_ls_under_output_noise() {
    let (ls, iv) = ls_iv_mean_errors(10000, 20);
    assert!(iv < ls, "iv {iv} ls {ls}");
}

#[test]
fn iv_error_shrinks_with_record_length() {
    let errs: Vec<f64> = [500, 2000, 8000].iter().map(|&n| ls_iv_mean_errors(n, 20).1).collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn iv_with_identical_logs_equals_ls() {
    // the IV ridge bias scales with the square of the moment matrix, so the
    // two only agree once regularization is negligible for both
    let log = lti_log(800, 0.0, 4, 0);
    let sys = build_regression(&log, Some(&log), &pi_structure(1e15), &pi_reference()).unwrap();
    let plain = build_regression(&log, None, &pi_structure(1e15), &pi_reference()).unwrap();
    let a = fit_iv(&sys, 1e15).unwrap().as_vector();
    let b = fit_ls(&plain, 1e15).unwrap().as_vector();
    assert!((a - b).amax() < 1e-9);
}

#[test]
fn iv_without_instruments_is_misuse() {
    let log = lti_log(100, 0.0, 4, 0);
    let sys = build_regression(&log, None, &pi_structure(1e6), &pi_reference()).unwrap();
    assert!(fit_iv(&sys, 1e6).is_err());
}

#[test]
fn flat_single_center_kernel_equals_constant_fit() {
    // a constant scheduling record leaves every center at the same point
    let base = lti_log(600, 0.0, 9, 0);
    let log = ExperimentLog::new(base.u.clone(), base.y.clone(), base.p.map(|_| 0.3)).unwrap();
    let mut kernel = pi_structure(1e3);
    kernel.scheduling_lags = vec![1];
    kernel.coefficient_model = CoefficientModel::Kernel {
        sigma: 1e12,
        center_stride: 10_000,
    };
    let (k, _) = identify(&log, None, &kernel, &pi_reference()).unwrap();
    let (c, _) = identify(&log, None, &pi_structure(1e3), &pi_reference()).unwrap();
    assert_eq!(k.features.centers.len(), 1);
    let ck = k.coefficients(&[0.3]);
    let cc = c.coefficients(&[]);
    for (x, y) in ck.a.iter().chain(&ck.b).zip(cc.a.iter().chain(&cc.b)) {
        assert!((x - y).abs() < 1e-8, "{x} vs {y}");
    }
}

#[test]
fn orthogonal_instruments_force_zero() {
    let log = lti_log(400, 0.0, 2, 0);
    let zero = ExperimentLog::from_vecs(vec![0.0; 400], vec![0.0; 400], vec![0.0; 400], 0.01).unwrap();
    let sys = build_regression(&log, Some(&zero), &pi_structure(1e6), &pi_reference()).unwrap();
    assert!(fit_iv(&sys, 1e6).unwrap().as_vector().amax() < 1e-12);
}

#[test]
fn pi_controller_integrates_a_constant_error() {
    // with a_1 = -1, b = [2, 0] and a unit error, u ramps by 2 per sample
    let c = InnerControllerModel::constant(&[-1.0], &[2.0, 0.0], FixedPart::Identity, pi_reference()).unwrap();
    let mut h = c.initial_history();
    for k in 0..20 {
        let u = c.controller_step(&mut h, 1.0, 0.0, 0.0);
        assert!((u - 2.0 * (k + 1) as f64).abs() < 1e-12);
    }
    // integral action with b = [0.2, 0]: u = 2 + 0.2 t reached through the integrator
    let c = InnerControllerModel::constant(&[], &[0.2], FixedPart::Integrator, pi_reference()).unwrap();
    let mut h = c.initial_history();
    let mut u = Vec::new();
    for _ in 0..10 {
        u.push(c.controller_step(&mut h, 1.0, 0.0, 0.0));
    }
    for (k, v) in u.iter().enumerate() {
        assert!((v - 0.2 * (k + 1) as f64).abs() < 1e-12);
    }
}

#[test]
fn controller_recursion_matches_a_direct_difference_equation() {
    let a = [0.3, -0.1];
    let b = [1.5, -0.4, 0.2];
    let c = InnerControllerModel::constant(&a, &b, FixedPart::Integrator, pi_reference()).unwrap();
    let g = gaussian(1000, 1.0, 5);
    let y = gaussian(1000, 1.0, 6);
    let mut h = c.initial_history();
    let got: Vec<f64> = g.iter().zip(&y).map(|(&gk, &yk)| c.controller_step(&mut h, gk, yk, 0.0)).collect();
    let mut v = vec![0.0; 1000];
    let mut u = vec![0.0; 1000];
    let at = |x: &[f64], k: isize| if k < 0 { 0.0 } else { x[k as usize] };
    for t in 0..1000 {
        let e = g[t] - y[t];
        v[t] = at(&v, t as isize - 1) + e;
        let ti = t as isize;
        u[t] = b[0] * v[t] + b[1] * at(&v, ti - 1) + b[2] * at(&v, ti - 2) - a[0] * at(&u, ti - 1) - a[1] * at(&u, ti - 2);
    }
    for t in 0..1000 {
        assert!((got[t] - u[t]).abs() <= 1e-12 * (1.0 + u[t].abs()), "t = {t}");
    }
}

#[test]
fn cross_validation_on_noiseless_data() {
    let train = lti_log(800, 0.0, 11, 0);
    let val = lti_log(500, 0.0, 12, 0);
    let single = cross_validate(&train, None, &val, &[(1e9, None)], &pi_structure(1.0), &pi_reference()).unwrap();
    assert_eq!(single.gamma, 1e9);
    assert!(single.scores[0].2 < 1e-8);
    let grid = [(1e-3, None), (1.0, None), (1e9, None)];
    let cv = cross_validate(&train, None, &val, &grid, &pi_structure(1.0), &pi_reference()).unwrap();
    assert_eq!(cv.gamma, 1e9);
    assert_eq!(cv.scores.len(), 3);
}

#[test]
fn integrator_validation_on_a_record_slice() {
    let structure = lpvdd::inner_synth::ControllerStructure {
        n_a: 0,
        fixed_part: FixedPart::Integrator,
        ..pi_structure(1e9)
    };
    let full = lti_log(1300, 0.0, 13, 0);
    let train = full.slice(0, 800).unwrap();
    let val = full.slice(800, 1300).unwrap();
    let cv = cross_validate(&train, None, &val, &[(1e9, None)], &structure, &pi_reference()).unwrap();
    assert!(cv.scores[0].2 < 1e-8, "{}", cv.scores[0].2);
}

#[test]
fn kernel_feature_values() {
    let centers = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
    let f = build_kernel_features(&centers, &[0.0, 0.0], 25.0);
    assert_eq!(f[0], 1.0);
    assert!((f[1] - (-1.0f64).exp()).abs() < 1e-15);
    let flat = build_kernel_features(&centers, &[1.0, -2.0], 1e300);
    assert!(flat.iter().all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn controller_file_round_trip_through_toml() {
    let mut plant = Lti(0.0);
    let n = 300;
    let u = gaussian(n, 1.0, 3);
    let p: Vec<f64> = gaussian(n, 1.0, 4);
    let mut y = Vec::new();
    for k in 0..n {
        y.push(plant.output());
        plant.advance(u[k], 0.0, 0.01).unwrap();
    }
    let log = ExperimentLog::new(signal(u, 0.01), signal(y, 0.01), signal(p, 0.01)).unwrap();
    let mut s = pi_structure(100.0);
    s.scheduling_lags = vec![1, 2];
    s.coefficient_model = CoefficientModel::kernel(2.0);
    let (ctrl, _) = identify(&log, None, &s, &pi_reference()).unwrap();
    let text = toml::to_string(&ControllerFile::from(&ctrl)).unwrap();
    let back = InnerControllerModel::try_from(toml::from_str::<ControllerFile>(&text).unwrap()).unwrap();
    assert_eq!(back.coefficients(&[0.1, -0.4]), ctrl.coefficients(&[0.1, -0.4]));
}

proptest! {
    #[test]
    fn residuals_vanish_on_data_from_the_fitted_controller(seed in 0u64..500) {
        // regress a controller's own input record on its virtual error
        let log = lti_log(300, 0.0, seed, 0);
        let sys = build_regression(&log, None, &pi_structure(1e10), &pi_reference()).unwrap();
        let w = fit_ls(&sys, 1e10).unwrap();
        prop_assert!(residuals(&sys, &w).amax() < 1e-6);
    }
}
