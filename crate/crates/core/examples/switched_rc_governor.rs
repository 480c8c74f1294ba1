//! Switched RC circuit with `u, y` in `[0, 5]`: the governor lets the loop
//! respond faster than the reference model while keeping the output inside
//! the bounds through the switch flips.

use lpvdd::cli::{collect_logs, loop_metrics, make_plant, state_source};
use lpvdd::closed_loop::{run_hierarchical, run_inner_loop, Governor, LoopOptions};
use lpvdd::config::Config;
use lpvdd::inner_synth::identify;
use lpvdd::realization::build_augmented;
use std::error::Error;
use std::path::PathBuf;

fn metric(rows: &[(String, Option<f64>)], name: &str) -> Option<f64> {
    rows.iter().find(|(n, _)| n == name).and_then(|(_, v)| *v)
}

fn main() -> Result<(), Box<dyn Error>> {
    let cfg = Config::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/switched_rc.toml"))?;
    let (train, inst, _) = collect_logs(&cfg)?;
    let reference = cfg.reference_model.resolve();
    let (ctrl, _) = identify(&train, cfg.controller.instrumental.then_some(&inst), &cfg.controller.structure, &reference)?;
    let aug = build_augmented(&reference, &ctrl)?;
    let r = cfg.scenario.reference_signal()?;
    let sched = cfg.scenario.scheduling()?;
    let opts = LoopOptions { noise_std: cfg.scenario.noise_std, seed: cfg.scenario.noise_seed };

    let inner = run_inner_loop(&mut make_plant(&cfg)?, &ctrl, &r, &sched, &opts)?;
    let governor = Governor::Mpc { model: &aug, config: &cfg.mpc, source: state_source(&cfg, &aug)? };
    let (hier, diags) = run_hierarchical(&mut make_plant(&cfg)?, &ctrl, governor, &r, &sched, &opts)?;

    let a = loop_metrics(&inner, &r, None, &cfg.mpc.bounds)?;
    let b = loop_metrics(&hier, &r, None, &cfg.mpc.bounds)?;
    println!("{:<22} {:>10} {:>10}", "", "inner", "governor");
    for name in ["step_rise_time_s", "step_settling_time_s", "step_overshoot_pct", "y_violations", "u_violations"] {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!("{name:<22} {:>10} {:>10}", f(metric(&a, name)), f(metric(&b, name)));
    }
    let eps = diags.iter().fold(0.0f64, |m, d| m.max(d.eps));
    let active = diags.iter().filter(|d| d.active_set_size > 0).count();
    println!("largest slack {eps:.2e}; constraints active at {active} of {} samples", diags.len());

    let y = hier.log.y.dense()?;
    let g = hier.g.dense()?;
    println!("\n   t      r      g      y");
    for k in (0..y.len()).step_by(40) {
        println!("{:5.1} {:6.2} {:6.2} {:6.3}", k as f64 * r.sample_period(), r.get(k).unwrap_or(f64::NAN), g[k], y[k]);
    }
    Ok(())
}
