//! Estimate the augmented state of the switched RC inner loop from a noisy
//! output and the exactly known input, and compare with the true state.

use lpvdd::inner_synth::{identify, ControllerStructure};
use lpvdd::plant_lab::{generate_excitation, simulate_switched_rc, ExcitationSpec, SwitchedRcPlant};
use lpvdd::realization::{build_augmented, lagged_p_vectors};
use lpvdd::refmodel::LpvStateSpace;
use lpvdd::state_estimator::{kf_step, KalmanFilter, KalmanTuning, Measurement};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::error::Error;

fn main() -> Result<(), Box<dyn Error>> {
    let plant = SwitchedRcPlant::default();
    let u = generate_excitation(&ExcitationSpec::piecewise_constant(2.5, 1.0, 20, 1), 600, 0.15)?;
    let s = generate_excitation(&ExcitationSpec::telegraph(100, 2), 600, 0.15)?;
    let log = simulate_switched_rc(&plant, &u, &s, 0.01, 3)?;
    let inst = simulate_switched_rc(&plant, &u, &s, 0.01, 4)?;
    let reference = LpvStateSpace::unit_gain_first_order(0.95);
    let (ctrl, _) = identify(&log, Some(&inst), &ControllerStructure::switched_rc_default(), &reference)?;
    let aug = build_augmented(&reference, &ctrl)?;

    let n = 500;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let g: Vec<f64> = (0..n).map(|k| if (k / 60) % 2 == 0 { 1.0 } else { 3.0 }).collect();
    let sw: Vec<f64> = (0..n).map(|k| f64::from(u8::from((k / 150) % 2 == 1))).collect();
    let p = lagged_p_vectors(&sw, aug.p_vector_len() - 1);
    let noise = Normal::new(0.0, 0.05)?;

    let mut x = DVector::zeros(aug.state_dim());
    let mut kf = KalmanFilter::new(aug.state_dim(), &KalmanTuning::default())?;
    let x_m = aug.layout().x_m.start;
    let (mut raw, mut filtered) = (0.0, 0.0);
    for t in 0..n {
        let m = aug.evaluate_at(&p[t])?;
        let out = &m.c * &x + &m.d * g[t];
        let meas = Measurement { y: out[0] + noise.sample(&mut rng), u: out[1], g: g[t] };
        if t == 0 {
            kf.correct_output(&m, meas.y)?;
            kf.correct_input(&m, meas.u, meas.g)?;
        } else {
            kf_step(&mut kf, &aug, g[t - 1], &meas, &p[t - 1], &p[t])?;
        }
        if t >= 20 {
            raw += (meas.y - out[0]).powi(2);
            filtered += (kf.x[x_m] - x[x_m]).powi(2);
        }
        if t % 100 == 0 {
            println!("t {t:3}  true {:.4}  measured {:.4}  estimate {:.4}  trace P {:.2e}", x[x_m], meas.y, kf.x[x_m], kf.p.trace());
        }
        x = &m.a * &x + &m.b * g[t];
    }
    let k = (n - 20) as f64;
    println!("output rmse: raw {:.4}, filtered {:.4}", (raw / k).sqrt(), (filtered / k).sqrt());
    println!("smallest covariance eigenvalue {:.2e}", kf.min_covariance_eigenvalue());
    Ok(())
}
