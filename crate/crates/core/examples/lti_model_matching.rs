//! Direct controller identification on `y(t+1) = 0.9 y(t) + 0.1 u(t)` with
//! the reference model `0.2 / (q - 0.8)`. The exact matching controller is
//! `u(t) = u(t-1) + 2 e(t) - 1.8 e(t-1)`. With output noise plain least
//! squares is biased; a second experiment as instruments removes the bias.

use lpvdd::inner_synth::{identify, CoefficientModel, ControllerStructure, FixedPart};
use lpvdd::refmodel::LpvStateSpace;
use lpvdd::signals::ExperimentLog;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::error::Error;

fn record(u: &[f64], noise_std: f64, seed: u64) -> Result<ExperimentLog, Box<dyn Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(f64::MIN_POSITIVE))?;
    let mut x = 0.0;
    let mut y = Vec::with_capacity(u.len());
    for &uk in u {
        y.push(x + if noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 });
        x = 0.9 * x + 0.1 * uk;
    }
    Ok(ExperimentLog::from_vecs(u.to_vec(), y.clone(), y, 0.01)?)
}

fn main() -> Result<(), Box<dyn Error>> {
    let reference = LpvStateSpace::first_order(0.8, 0.2);
    let structure = ControllerStructure {
        n_a: 1,
        n_b: 1,
        scheduling_lags: Vec::new(),
        coefficient_model: CoefficientModel::constant(),
        fixed_part: FixedPart::Identity,
        gamma: 1e9,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u: Vec<f64> = Normal::new(0.0, 1.0)?.sample_iter(&mut rng).take(8000).collect();
    let show = |label: &str, log: &ExperimentLog, inst: Option<&ExperimentLog>| -> Result<(), Box<dyn Error>> {
        let (ctrl, rep) = identify(log, inst, &structure, &reference)?;
        let c = ctrl.coefficients(&[]);
        println!(
            "{label:<12} a1 {:+.5}  b0 {:+.5}  b1 {:+.5}  residual rms {:.2e}",
            c.a[0], c.b[0], c.b[1], rep.residual_rms
        );
        Ok(())
    };

    println!("truth        a1 -1.00000  b0 +2.00000  b1 -1.80000");
    show("noiseless", &record(&u, 0.0, 0)?, None)?;
    let noisy = record(&u, 0.0229, 2)?;
    let second = record(&u, 0.0229, 3)?;
    show("noisy LS", &noisy, None)?;
    show("noisy IV", &noisy, Some(&second))?;
    Ok(())
}
