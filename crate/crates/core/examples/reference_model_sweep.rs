//! Refit the inner controller for a range of reference-model poles and
//! measure how well each closed loop matches its model. Faster models ask
//! more of the plant; past some bandwidth the loop goes unstable.
//!
//! `cargo run --release --example reference_model_sweep [config.toml]`

use lpvdd::cli::{collect_logs, make_plant};
use lpvdd::closed_loop::{sensitivity_sweep, LoopOptions, SweepScenario};
use lpvdd::config::Config;
use std::error::Error;
use std::path::PathBuf;

fn main() -> Result<(), Box<dyn Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/dc_motor.toml"));
    let cfg = Config::load(&path)?;
    let (train, inst, _) = collect_logs(&cfg)?;
    let scenario = SweepScenario {
        train,
        instrument: cfg.controller.instrumental.then_some(inst),
        g: cfg.scenario.reference_signal()?,
        scheduling: cfg.scenario.scheduling()?,
        options: LoopOptions::default(),
    };
    let rows = sensitivity_sweep(&make_plant(&cfg)?, &cfg.controller.structure, &cfg.sweep.poles, &scenario)?;
    println!("{:>10} {:>10} {:>12}", "pole", "cutoff Hz", "MS");
    for r in rows {
        let ms = match (r.ms, r.unstable) {
            (Some(ms), false) => format!("{ms:.4e}"),
            _ => "unstable".to_string(),
        };
        println!("{:>10.6} {:>10.3} {ms:>12}", r.pole, r.cutoff_hz);
    }
    Ok(())
}
