//! Full pipeline on the DC motor from `configs/dc_motor.toml`: open-loop
//! data, kernel IV inner controller, augmented model, and the MPC governor
//! with the 0.2 V rate limit, compared against the inner loop alone.
//!
//! `cargo run --release --example hierarchical_dc_motor [config.toml]`

use lpvdd::cli::{collect_logs, loop_metrics, make_plant, state_source};
use lpvdd::closed_loop::{desired_output, run_hierarchical, run_inner_loop, Governor, LoopOptions};
use lpvdd::config::Config;
use lpvdd::inner_synth::identify;
use lpvdd::realization::build_augmented;
use std::error::Error;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/dc_motor.toml"));
    let cfg = Config::load(&path)?;
    let (train, inst, _) = collect_logs(&cfg)?;
    let reference = cfg.reference_model.resolve();
    let inst = cfg.controller.instrumental.then_some(&inst);
    let (ctrl, rep) = identify(&train, inst, &cfg.controller.structure, &reference)?;
    println!("fit: {} rows, {} features, residual rms {:.3e}", rep.rows, rep.row_len, rep.residual_rms);
    let aug = build_augmented(&reference, &ctrl)?;
    println!("augmented state dimension {}", aug.state_dim());

    let r = cfg.scenario.reference_signal()?;
    let sched = cfg.scenario.scheduling()?;
    let opts = LoopOptions { noise_std: cfg.scenario.noise_std, seed: cfg.scenario.noise_seed };

    match run_inner_loop(&mut make_plant(&cfg)?, &ctrl, &r, &sched, &opts) {
        Ok(inner) => {
            let yd = desired_output(&reference, &inner.g, &inner.log.p)?;
            print_rows("inner loop", &loop_metrics(&inner, &r, Some(&yd), &cfg.mpc.bounds)?);
        }
        Err(e) => println!("inner loop: {e}"),
    }

    let governor = Governor::Mpc { model: &aug, config: &cfg.mpc, source: state_source(&cfg, &aug)? };
    match run_hierarchical(&mut make_plant(&cfg)?, &ctrl, governor, &r, &sched, &opts) {
        Ok((hier, diags)) => {
            let yd = desired_output(&reference, &hier.g, &hier.log.p)?;
            print_rows("with governor", &loop_metrics(&hier, &r, Some(&yd), &cfg.mpc.bounds)?);
            let iters = diags.iter().map(|d| d.qp_iters).max().unwrap_or(0);
            println!("  max QP iterations {iters}");
        }
        Err(e) => println!("with governor: {e}"),
    }
    Ok(())
}

fn print_rows(label: &str, rows: &[(String, Option<f64>)]) {
    println!("{label}:");
    for (name, v) in rows {
        match v {
            Some(v) => println!("  {name:<22} {v:.4}"),
            None => println!("  {name:<22} -"),
        }
    }
}
