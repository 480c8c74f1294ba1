//! Scheduling-dependent inner controller for the switched RC circuit: kernel
//! coefficient functions fitted by instrumental variables, hyperparameters
//! picked by validation, then checked in closed loop against the reference
//! model.

use lpvdd::closed_loop::{desired_output, run_inner_loop, LoopOptions, ReferenceProfile, Scheduling};
use lpvdd::inner_synth::{cross_validate, identify, ControllerStructure};
use lpvdd::metrics::matching_ms;
use lpvdd::plant_lab::{generate_excitation, simulate_switched_rc, ExcitationSpec, SwitchedRcPlant};
use lpvdd::refmodel::LpvStateSpace;
use std::error::Error;

fn main() -> Result<(), Box<dyn Error>> {
    let ts = 0.15;
    let plant = SwitchedRcPlant::default();
    let u = generate_excitation(&ExcitationSpec::piecewise_constant(2.5, 1.0, 20, 1), 1200, ts)?;
    let s = generate_excitation(&ExcitationSpec::telegraph(100, 2), 1200, ts)?;
    let log = simulate_switched_rc(&plant, &u, &s, 0.01, 3)?;
    let inst = simulate_switched_rc(&plant, &u, &s, 0.01, 4)?;
    let (train, val) = (log.slice(0, 800)?, log.slice(800, 1200)?);
    let inst = inst.slice(0, 800)?;

    let reference = LpvStateSpace::unit_gain_first_order(0.95);
    let mut structure = ControllerStructure::switched_rc_default();
    let grid: Vec<(f64, Option<f64>)> =
        [1e-2, 1.0, 1e2, 1e4].iter().flat_map(|&g| [0.1, 1.0].map(move |s| (g, Some(s)))).collect();
    let cv = cross_validate(&train, Some(&inst), &val, &grid, &structure, &reference)?;
    for (g, s, score) in &cv.scores {
        println!("gamma {g:>8.0e} sigma {:>4} validation {score:.3e}", s.unwrap_or(f64::NAN));
    }
    structure.gamma = cv.gamma;
    if let (Some(s), lpvdd::inner_synth::CoefficientModel::Kernel { sigma, .. }) = (cv.sigma, &mut structure.coefficient_model) {
        *sigma = s;
    }
    let (ctrl, rep) = identify(&train, Some(&inst), &structure, &reference)?;
    println!("picked gamma {:.0e} sigma {:?}; {} rows of {} features", cv.gamma, cv.sigma, rep.rows, rep.row_len);
    for p in [0.0, 1.0] {
        let c = ctrl.coefficients(&ctrl.scheduling_vector(p, &[p]));
        println!("switch {p}: a {:?} b {:?}", c.a, c.b);
    }

    let g = ReferenceProfile { duration_s: 90.0, steps: vec![(0.0, 0.0), (6.0, 2.0), (45.0, 3.5)] }.sample(ts)?;
    let sw = ReferenceProfile { duration_s: 90.0, steps: vec![(0.0, 0.0), (30.0, 1.0), (60.0, 0.0)] }.sample(ts)?;
    let run = run_inner_loop(&mut plant.clone(), &ctrl, &g, &Scheduling::Exogenous(sw), &LoopOptions::default())?;
    let yd = desired_output(&reference, &g, &run.log.p)?;
    println!("closed-loop matching MS {:.3e}", matching_ms(&run.log.y, &yd)?);
    Ok(())
}
