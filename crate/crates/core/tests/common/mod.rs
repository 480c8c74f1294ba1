#![allow(dead_code)]

use lpvdd::inner_synth::{FixedPart, InnerControllerModel};
use lpvdd::plant_lab::{Plant, PlantError};
use lpvdd::qp::QpProblem;
use lpvdd::refmodel::LpvStateSpace;
use lpvdd::signals::{ExperimentLog, SampledSignal};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// `y(t+1) = 0.9 y(t) + 0.1 u(t)`.
#[derive(Clone, Debug)]
pub struct Lti(pub f64);

impl Plant for Lti {
    fn output(&self) -> f64 {
        self.0
    }

    fn advance(&mut self, u: f64, _p: f64, _dt: f64) -> Result<(), PlantError> {
        self.0 = 0.9 * self.0 + 0.1 * u;
        Ok(())
    }
}

/// Reference model the PI fixture matches exactly on [`Lti`].
pub fn pi_reference() -> LpvStateSpace {
    LpvStateSpace::first_order(0.8, 0.2)
}

/// `u(t) = u(t-1) + 2 e(t) - 1.8 e(t-1)`.
pub fn pi_controller() -> InnerControllerModel {
    InnerControllerModel::constant(&[-1.0], &[2.0, -1.8], FixedPart::Identity, pi_reference()).unwrap()
}

pub fn gaussian(n: usize, std: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, std).unwrap();
    (0..n).map(|_| d.sample(&mut rng)).collect()
}

/// Open-loop record of [`Lti`] under white input, with output noise.
pub fn lti_log(n: usize, noise_std: f64, input_seed: u64, noise_seed: u64) -> ExperimentLog {
    let u = gaussian(n, 1.0, input_seed);
    let noise = gaussian(n, noise_std, noise_seed);
    let mut plant = Lti(0.0);
    let mut y = Vec::with_capacity(n);
    for k in 0..n {
        y.push(plant.output() + noise[k]);
        plant.advance(u[k], 0.0, 0.01).unwrap();
    }
    ExperimentLog::from_vecs(u, y.clone(), y, 0.01).unwrap()
}

pub fn signal(v: Vec<f64>, ts: f64) -> SampledSignal {
    SampledSignal::new(v, ts).unwrap()
}

/// `[a_1, b_0, b_1]` of the controller that matches [`pi_reference`] on [`Lti`].
pub const PI_TRUTH: [f64; 3] = [-1.0, 2.0, -1.8];

pub fn pi_structure(gamma: f64) -> lpvdd::inner_synth::ControllerStructure {
    lpvdd::inner_synth::ControllerStructure {
        n_a: 1,
        n_b: 1,
        scheduling_lags: Vec::new(),
        coefficient_model: lpvdd::inner_synth::CoefficientModel::constant(),
        fixed_part: FixedPart::Identity,
        gamma,
    }
}

/// Output noise std giving 30 dB against the clean [`Lti`] response to unit
/// white input.
pub fn lti_noise_std_30db() -> f64 {
    (0.01 / (1.0 - 0.81) / 1000.0f64).sqrt()
}

fn coefficient_error(ctrl: &InnerControllerModel) -> f64 {
    let c = ctrl.coefficients(&[]);
    let got = [c.a[0], c.b[0], c.b[1]];
    got.iter().zip(PI_TRUTH).map(|(g, t)| (g - t).powi(2)).sum::<f64>().sqrt()
}

/// Mean coefficient error of the LS and IV fits over `seeds` noisy records of
/// length `n` (30 dB, two noise realizations per seed).
pub fn ls_iv_mean_errors(n: usize, seeds: u64) -> (f64, f64) {
    use lpvdd::inner_synth::identify;
    let std = lti_noise_std_30db();
    let structure = pi_structure(1e9);
    let (mut ls, mut iv) = (0.0, 0.0);
    for seed in 0..seeds {
        let train = lti_log(n, std, 1000 + seed, 2000 + seed);
        let inst = lti_log(n, std, 1000 + seed, 3000 + seed);
        ls += coefficient_error(&identify(&train, None, &structure, &pi_reference()).unwrap().0);
        iv += coefficient_error(&identify(&train, Some(&inst), &structure, &pi_reference()).unwrap().0);
    }
    (ls / seeds as f64, iv / seeds as f64)
}

/// Kernel controller fitted on a short open-loop record of the switched RC
/// circuit, with its reference model.
pub fn rc_kernel_controller() -> InnerControllerModel {
    use lpvdd::inner_synth::{identify, ControllerStructure};
    use lpvdd::plant_lab::{generate_excitation, simulate_switched_rc, ExcitationSpec, SwitchedRcPlant};
    let u = generate_excitation(&ExcitationSpec::piecewise_constant(2.5, 1.0, 20, 1), 600, 0.15).unwrap();
    let s = generate_excitation(&ExcitationSpec::telegraph(100, 2), 600, 0.15).unwrap();
    let log = simulate_switched_rc(&SwitchedRcPlant::default(), &u, &s, 0.01, 3).unwrap();
    let inst = simulate_switched_rc(&SwitchedRcPlant::default(), &u, &s, 0.01, 4).unwrap();
    let m = LpvStateSpace::unit_gain_first_order(0.95);
    identify(&log, Some(&inst), &ControllerStructure::switched_rc_default(), &m).unwrap().0
}

/// Kernel controller with the DC-motor structure (orders 4/4, integrator,
/// lags 1..4) fitted on a short random record.
pub fn motor_structure_controller() -> InnerControllerModel {
    use lpvdd::inner_synth::{identify, ControllerStructure};
    let n = 300;
    let u = gaussian(n, 1.0, 21);
    let mut plant = Lti(0.0);
    let mut y = Vec::with_capacity(n);
    for &uk in &u {
        y.push(plant.output());
        plant.advance(uk, 0.0, 0.01).unwrap();
    }
    let p = gaussian(n, 1.0, 22);
    let log = ExperimentLog::from_vecs(u, y, p, 0.01).unwrap();
    let mut structure = ControllerStructure::dc_motor_default();
    structure.gamma = 10.0;
    identify(&log, None, &structure, &LpvStateSpace::unit_gain_first_order(0.99)).unwrap().0
}

/// Minimum objective over the equality-constrained optima of every subset of
/// constraints that is primal feasible. For a strictly convex problem this is
/// the global optimum.
pub fn enumerate(p: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let (a, b) = p.stacked_constraints();
    let n = p.n_vars();
    let m = a.nrows();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if idx.len() > n {
            continue;
        }
        let w = idx.len();
        let mut k = DMatrix::zeros(n + w, n + w);
        k.view_mut((0, 0), (n, n)).copy_from(&p.h);
        let mut rhs = DVector::zeros(n + w);
        rhs.rows_mut(0, n).copy_from(&(-&p.f));
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..n {
                k[(n + r, j)] = a[(i, j)];
                k[(j, n + r)] = a[(i, j)];
            }
            rhs[n + r] = b[i];
        }
        let lu = k.lu();
        if lu.determinant().abs() < 1e-12 {
            continue;
        }
        let Some(sol) = lu.solve(&rhs) else { continue };
        let z = sol.rows(0, n).into_owned();
        let feasible = (0..m).all(|i| a.row(i).transpose().dot(&z) - b[i] <= 1e-9 * (1.0 + b[i].abs()));
        if !feasible {
            continue;
        }
        let obj = p.objective(&z);
        if best.as_ref().is_none_or(|(_, o)| obj < *o) {
            best = Some((z, obj));
        }
    }
    best
}
