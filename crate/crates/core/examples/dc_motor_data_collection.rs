//! Open-loop experiment on the DC motor with the unbalanced disk: filtered
//! Gaussian voltage, noisy angle at 43 dB, and a second noise realization
//! for the instruments.
//!
//! `cargo run --release --example dc_motor_data_collection [out.csv]`

use lpvdd::plant_lab::{
    dc_motor_clean_output, empirical_snr_db, generate_excitation, repeat_experiment, simulate_dc_motor, DcMotorParams,
    DcMotorPlant, ExcitationSpec,
};
use std::error::Error;
use std::fs::File;

fn main() -> Result<(), Box<dyn Error>> {
    let plant = DcMotorPlant::new(DcMotorParams::default())?;
    let u = generate_excitation(&ExcitationSpec::filtered_gaussian(16.0, 1.6, 1), 2000, 0.01)?;
    let train = simulate_dc_motor(&plant, &u, 43.0, 10)?;
    let inst = repeat_experiment(&plant, &u, 43.0, 20)?;

    let clean = dc_motor_clean_output(&plant, &u)?;
    let y = train.y.dense()?;
    let y2 = inst.y.dense()?;
    let corr = {
        let e1: Vec<f64> = y.iter().zip(&clean).map(|(a, b)| a - b).collect();
        let e2: Vec<f64> = y2.iter().zip(&clean).map(|(a, b)| a - b).collect();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        dot(&e1, &e2) / (dot(&e1, &e1) * dot(&e2, &e2)).sqrt()
    };
    let uv = u.dense()?;
    let range = |v: &[f64]| v.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)));

    println!("samples          {}", train.len());
    println!("voltage range    {:?}", range(&uv));
    println!("angle range      {:?}", range(&clean));
    println!("snr              {:.2} dB", empirical_snr_db(&clean, &y));
    println!("noise corr       {corr:.4} between the two realizations");

    if let Some(path) = std::env::args().nth(1) {
        train.write_csv(File::create(&path)?)?;
        println!("wrote {path}");
    }
    Ok(())
}
