//! `lpvdd` command line: collect data, fit the inner controller, build the
//! augmented model, run the governor, sweep reference models, report.
//!
//! Every subcommand reads the same TOML config (see [`crate::config`]) and
//! writes into `--out`. Outputs depend only on the config, the input files
//! and the seed.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::closed_loop::{
    desired_output, run_hierarchical, run_inner_loop, sensitivity_sweep, ClosedLoopLog, Governor, LoopError,
    LoopOptions, SweepScenario,
};
use crate::config::{Config, ConfigError, CvGrid, EstimatorKind, PlantKind};
use crate::inner_synth::{cross_validate, identify, CoefficientModel, ControllerFile, InnerControllerModel, InnerError};
use crate::metrics::{increments, matching_ms, step_metrics, summary, violation_stats, write_metrics_csv, MetricsError};
use crate::mpc::StepDiagnostics;
use crate::plant_lab::{
    generate_excitation, repeat_experiment, simulate_dc_motor, simulate_switched_rc, DcMotorPlant, Plant, PlantError,
    SwitchedRcPlant,
};
use crate::realization::{build_augmented, AugmentedFile, AugmentedModel, RealizationError};
use crate::signals::{read_columns, BoundSet, ExperimentLog, SampledSignal, SignalError};
use crate::state_estimator::{EstimatorError, StateSource};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Inner(#[from] InnerError),
    #[error(transparent)]
    Realization(#[from] RealizationError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Loop(#[from] LoopError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Parser)]
#[command(name = "lpvdd", version, about = "Data-driven inner LPV control with an MPC reference governor")]
pub struct Cli {
    /// TOML run configuration. Defaults describe the DC motor case.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every random seed of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Open-loop experiment: train.csv, instrument.csv, validation.csv.
    Collect,
    /// Fit the inner controller: controller.toml, fit_report.csv.
    FitInner {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        instrument: Option<PathBuf>,
        /// Needed for the cross-validation grid.
        #[arg(long)]
        validation: Option<PathBuf>,
    },
    /// Inner loop on the scenario: inner_log.csv, inner_metrics.csv.
    ValidateInner {
        #[arg(long)]
        controller: PathBuf,
    },
    /// Augmented model of the inner loop: augmented.toml.
    BuildAugmented {
        #[arg(long)]
        controller: PathBuf,
    },
    /// Governed loop on the scenario: mpc_log.csv, mpc_diagnostics.csv,
    /// mpc_metrics.csv.
    RunMpc {
        #[arg(long)]
        augmented: PathBuf,
    },
    /// Matching error for each sweep pole: sweep.csv.
    Sweep {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        instrument: Option<PathBuf>,
    },
    /// Metrics and plot data for a closed-loop log: report_metrics.csv,
    /// plot_output.csv, plot_input.csv.
    Report {
        #[arg(long)]
        log: PathBuf,
    },
}

/// Entry point of the binary. Returns the process exit code.
pub fn run() -> i32 {
    run_with(std::env::args_os())
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    if let Some(n) = std::env::var("LPVDD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // only the first call in a process can size the global pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.reseed(seed);
        cfg.scenario.noise_seed = seed;
    }
    fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Collect => collect(&cfg, out),
        Command::FitInner {
            train,
            instrument,
            validation,
        } => fit_inner(&cfg, out, train, instrument.as_deref(), validation.as_deref()),
        Command::ValidateInner { controller } => validate_inner(&cfg, out, controller),
        Command::BuildAugmented { controller } => build(out, controller),
        Command::RunMpc { augmented } => run_mpc(&cfg, out, augmented),
        Command::Sweep { train, instrument } => sweep(&cfg, out, train, instrument.as_deref()),
        Command::Report { log } => report(&cfg, out, log),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_log(path: &Path) -> Result<ExperimentLog, CliError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    ExperimentLog::read_csv(f).map_err(|e| CliError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_log(path: &Path, log: &ExperimentLog) -> Result<(), CliError> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    write_file(path, &buf)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file_err = |message: String| CliError::File {
        path: path.display().to_string(),
        message,
    };
    let de = toml::Deserializer::parse(&text).map_err(|e| file_err(e.to_string()))?;
    serde_path_to_error::deserialize(de).map_err(|e| file_err(format!("field `{}`: {}", e.path(), e.inner().message())))
}

fn write_toml<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = toml::to_string(value).map_err(|e| CliError::Input(e.to_string()))?;
    write_file(path, text.as_bytes())
}

/// Either of the simulated plants behind one type.
#[derive(Clone, Debug)]
pub enum AnyPlant {
    DcMotor(DcMotorPlant),
    SwitchedRc(SwitchedRcPlant),
}

impl Plant for AnyPlant {
    fn output(&self) -> f64 {
        match self {
            AnyPlant::DcMotor(p) => p.output(),
            AnyPlant::SwitchedRc(p) => p.output(),
        }
    }

    fn advance(&mut self, u: f64, p: f64, dt: f64) -> Result<(), PlantError> {
        match self {
            AnyPlant::DcMotor(m) => m.advance(u, p, dt),
            AnyPlant::SwitchedRc(m) => m.advance(u, p, dt),
        }
    }
}

pub fn make_plant(cfg: &Config) -> Result<AnyPlant, CliError> {
    let init = &cfg.plant.initial_state;
    Ok(match cfg.plant.kind {
        PlantKind::DcMotor => {
            let mut p = DcMotorPlant::new(cfg.plant.dc_motor.clone())?;
            if init.len() == 3 {
                p = p.with_state([init[0], init[1], init[2]]);
            }
            AnyPlant::DcMotor(p)
        }
        PlantKind::SwitchedRc => {
            let mut p = cfg.plant.switched_rc.clone();
            p.validate()?;
            p.state = init.first().copied().unwrap_or(0.0);
            AnyPlant::SwitchedRc(p)
        }
    })
}

/// Training, instrument and validation logs of the configured experiment.
pub fn collect_logs(cfg: &Config) -> Result<(ExperimentLog, ExperimentLog, Option<ExperimentLog>), CliError> {
    let e = &cfg.experiment;
    let u = generate_excitation(&e.excitation, e.samples, e.sample_period)?;
    let (full, inst) = match make_plant(cfg)? {
        AnyPlant::DcMotor(plant) => {
            let snr = e.snr_db.unwrap_or(f64::INFINITY);
            (
                simulate_dc_motor(&plant, &u, snr, e.noise_seed)?,
                repeat_experiment(&plant, &u, snr, e.instrument_seed)?,
            )
        }
        AnyPlant::SwitchedRc(plant) => {
            let s = generate_excitation(&e.switch, e.samples, e.sample_period)?;
            (
                simulate_switched_rc(&plant, &u, &s, e.noise_std, e.noise_seed)?,
                simulate_switched_rc(&plant, &u, &s, e.noise_std, e.instrument_seed)?,
            )
        }
    };
    let val = (e.train < e.samples).then(|| full.slice(e.train, e.samples)).transpose()?;
    Ok((full.slice(0, e.train)?, inst.slice(0, e.train)?, val))
}

fn collect(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let (train, inst, val) = collect_logs(cfg)?;
    write_log(&out.join("train.csv"), &train)?;
    write_log(&out.join("instrument.csv"), &inst)?;
    if let Some(v) = val {
        write_log(&out.join("validation.csv"), &v)?;
    }
    log::info!("wrote {} training samples to {}", train.len(), out.display());
    Ok(())
}

fn check_same_grid(a: &ExperimentLog, b: &ExperimentLog, what: &str) -> Result<(), CliError> {
    if a.len() != b.len() || a.sample_period() != b.sample_period() {
        return Err(CliError::Input(format!(
            "{what} log has {} samples at {} s, training log has {} at {} s",
            b.len(),
            b.sample_period(),
            a.len(),
            a.sample_period()
        )));
    }
    Ok(())
}

fn cv_grid(grid: &CvGrid, model: &CoefficientModel) -> Vec<(f64, Option<f64>)> {
    let sigmas: Vec<Option<f64>> = match model {
        CoefficientModel::Kernel { .. } if !grid.sigma.is_empty() => grid.sigma.iter().map(|&s| Some(s)).collect(),
        _ => vec![None],
    };
    grid.gamma
        .iter()
        .flat_map(|&g| sigmas.iter().map(move |&s| (g, s)))
        .collect()
}

fn fit_inner(
    cfg: &Config,
    out: &Path,
    train: &Path,
    instrument: Option<&Path>,
    validation: Option<&Path>,
) -> Result<(), CliError> {
    let train = read_log(train)?;
    let inst = match instrument {
        Some(p) if cfg.controller.instrumental => Some(read_log(p)?),
        _ => None,
    };
    if let Some(i) = &inst {
        check_same_grid(&train, i, "instrument")?;
    }
    let reference = cfg.reference_model.resolve();
    let mut structure = cfg.controller.structure.clone();
    if let Some(grid) = &cfg.controller.cv {
        let val_path = validation.ok_or_else(|| CliError::Input("controller.cv needs --validation".into()))?;
        let val = read_log(val_path)?;
        let points = cv_grid(grid, &structure.coefficient_model);
        let cv = cross_validate(&train, inst.as_ref(), &val, &points, &structure, &reference)?;
        let mut csv = String::from("gamma,sigma,score\n");
        for (g, s, score) in &cv.scores {
            csv.push_str(&format!("{g},{},{score}\n", s.map(|s| s.to_string()).unwrap_or_default()));
        }
        write_file(&out.join("cv_scores.csv"), csv.as_bytes())?;
        structure.gamma = cv.gamma;
        if let (Some(s), CoefficientModel::Kernel { sigma, .. }) = (cv.sigma, &mut structure.coefficient_model) {
            *sigma = s;
        }
        log::info!("cross-validation picked gamma = {}, sigma = {:?}", cv.gamma, cv.sigma);
    }
    let (ctrl, rep) = identify(&train, inst.as_ref(), &structure, &reference)?;
    write_toml(&out.join("controller.toml"), &ControllerFile::from(&ctrl))?;
    let rows = [
        ("rows", Some(rep.rows as f64)),
        ("row_len", Some(rep.row_len as f64)),
        ("residual_rms", Some(rep.residual_rms)),
        ("target_rms", Some(rep.target_rms)),
        ("instrumental", Some(if rep.instrumental { 1.0 } else { 0.0 })),
        ("gamma", Some(structure.gamma)),
    ];
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows)?;
    write_file(&out.join("fit_report.csv"), &buf)?;
    log::info!("fit report:\n{}", summary(&rows));
    Ok(())
}

fn load_controller(path: &Path) -> Result<InnerControllerModel, CliError> {
    let file: ControllerFile = read_toml(path)?;
    Ok(InnerControllerModel::try_from(file)?)
}

/// Index of the first change of `r`, the index of the change after it (or
/// the end) and the levels before and after.
pub fn first_step(r: &[f64]) -> Option<(usize, usize, f64, f64)> {
    let r0 = *r.first()?;
    let start = r.iter().position(|&v| v != r0)?;
    let to = r[start];
    let end = r[start..].iter().position(|&v| v != to).map_or(r.len(), |k| start + k);
    Some((start, end, r0, to))
}

/// Metrics shared by `validate-inner`, `run-mpc` and `report`.
pub fn loop_metrics(
    log: &ClosedLoopLog,
    reference: &SampledSignal,
    y_d: Option<&SampledSignal>,
    bounds: &BoundSet,
) -> Result<Vec<(String, Option<f64>)>, CliError> {
    let mut rows = Vec::new();
    let n = log.log.len().min(reference.len());
    let y = log.log.y.slice(0, n)?;
    if let Some(yd) = y_d {
        rows.push(("ms".to_string(), Some(matching_ms(&y, &yd.slice(0, n)?)?)));
    }
    let r = reference.slice(0, n)?.dense()?;
    if let Some((start, end, from, to)) = first_step(&r) {
        let m = step_metrics(&y.slice(0, end)?, start, from, to)?;
        rows.extend(m.rows("step_"));
    }
    let u = log.log.u.dense()?;
    let du = increments(&u, 0.0);
    rows.push(("max_abs_du".into(), Some(du.iter().fold(0.0, |a: f64, &d| a.max(d.abs())))));
    let yv = y.dense()?;
    for (name, sig, lo, hi) in [
        ("u", &u, bounds.u_min, bounds.u_max),
        ("du", &du, bounds.du_min, bounds.du_max),
        ("y", &yv, bounds.y_min, bounds.y_max),
    ] {
        let (worst, count) = violation_stats(sig, lo, hi);
        rows.push((format!("{name}_max_violation"), Some(worst)));
        rows.push((format!("{name}_violations"), Some(count as f64)));
    }
    Ok(rows)
}

fn write_metrics(path: &Path, rows: &[(String, Option<f64>)]) -> Result<(), CliError> {
    let refs: Vec<(&str, Option<f64>)> = rows.iter().map(|(n, v)| (n.as_str(), *v)).collect();
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &refs)?;
    write_file(path, &buf)?;
    log::info!("{}:\n{}", path.display(), summary(&refs));
    Ok(())
}

fn write_closed_loop(path: &Path, log: &ClosedLoopLog, y_d: Option<&SampledSignal>) -> Result<(), CliError> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf, y_d)?;
    write_file(path, &buf)
}

fn loop_options(cfg: &Config) -> LoopOptions {
    LoopOptions {
        noise_std: cfg.scenario.noise_std,
        seed: cfg.scenario.noise_seed,
    }
}

/// Writes the partial log of a diverged run before passing the error on.
fn keep_partial<T>(res: Result<T, LoopError>, path: &Path) -> Result<T, CliError> {
    match res {
        Err(LoopError::Divergence { index, partial }) => {
            write_closed_loop(path, &partial, None)?;
            Err(LoopError::Divergence { index, partial }.into())
        }
        other => Ok(other?),
    }
}

fn validate_inner(cfg: &Config, out: &Path, controller: &Path) -> Result<(), CliError> {
    let ctrl = load_controller(controller)?;
    let g = cfg.scenario.reference_signal()?;
    let sched = cfg.scenario.scheduling()?;
    let mut plant = make_plant(cfg)?;
    let log_path = out.join("inner_log.csv");
    let run = keep_partial(run_inner_loop(&mut plant, &ctrl, &g, &sched, &loop_options(cfg)), &log_path)?;
    let yd = desired_output(&ctrl.reference_model, &g, &run.log.p)?;
    write_closed_loop(&log_path, &run, Some(&yd))?;
    let rows = loop_metrics(&run, &g, Some(&yd), &cfg.mpc.bounds)?;
    write_metrics(&out.join("inner_metrics.csv"), &rows)
}

fn build(out: &Path, controller: &Path) -> Result<(), CliError> {
    let ctrl = load_controller(controller)?;
    let aug = build_augmented(&ctrl.reference_model.clone(), &ctrl)?;
    write_toml(&out.join("augmented.toml"), &AugmentedFile::from(&aug))
}

pub fn state_source(cfg: &Config, model: &AugmentedModel) -> Result<StateSource, CliError> {
    Ok(match cfg.estimator.kind {
        EstimatorKind::Kalman => StateSource::kalman(model, &cfg.estimator.tuning)?,
        EstimatorKind::Direct => StateSource::direct(model, cfg.estimator.x_m_from_output)?,
    })
}

fn diagnostics_csv(ts: f64, diags: &[StepDiagnostics]) -> String {
    let mut s = String::from("t,g,eps,qp_iters,qp_kkt,active_set_size,u_pred\n");
    for (k, d) in diags.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            k as f64 * ts,
            d.g,
            d.eps,
            d.qp_iters,
            d.qp_kkt,
            d.active_set_size,
            d.u_pred
        ));
    }
    s
}

fn run_mpc(cfg: &Config, out: &Path, augmented: &Path) -> Result<(), CliError> {
    let file: AugmentedFile = read_toml(augmented)?;
    let model = AugmentedModel::try_from(file)?;
    let r = cfg.scenario.reference_signal()?;
    let sched = cfg.scenario.scheduling()?;
    let mut plant = make_plant(cfg)?;
    let governor = Governor::Mpc {
        model: &model,
        config: &cfg.mpc,
        source: state_source(cfg, &model)?,
    };
    let ctrl = model.controller().clone();
    let log_path = out.join("mpc_log.csv");
    let (run, diags) = keep_partial(
        run_hierarchical(&mut plant, &ctrl, governor, &r, &sched, &loop_options(cfg)),
        &log_path,
    )?;
    let yd = desired_output(model.reference(), &run.g, &run.log.p)?;
    write_closed_loop(&log_path, &run, Some(&yd))?;
    write_file(
        &out.join("mpc_diagnostics.csv"),
        diagnostics_csv(r.sample_period(), &diags).as_bytes(),
    )?;
    let mut rows = loop_metrics(&run, &r, Some(&yd), &cfg.mpc.bounds)?;
    let iters: Vec<f64> = diags.iter().map(|d| d.qp_iters as f64).collect();
    rows.push(("qp_iters_mean".into(), Some(iters.iter().sum::<f64>() / iters.len().max(1) as f64)));
    rows.push(("qp_iters_max".into(), Some(iters.iter().fold(0.0, |a: f64, &b| a.max(b)))));
    rows.push(("eps_max".into(), Some(diags.iter().fold(0.0, |a: f64, d| a.max(d.eps)))));
    write_metrics(&out.join("mpc_metrics.csv"), &rows)
}

fn sweep(cfg: &Config, out: &Path, train: &Path, instrument: Option<&Path>) -> Result<(), CliError> {
    let train = read_log(train)?;
    let inst = match instrument {
        Some(p) if cfg.controller.instrumental => Some(read_log(p)?),
        _ => None,
    };
    if let Some(i) = &inst {
        check_same_grid(&train, i, "instrument")?;
    }
    let scenario = SweepScenario {
        train,
        instrument: inst,
        g: cfg.scenario.reference_signal()?,
        scheduling: cfg.scenario.scheduling()?,
        options: loop_options(cfg),
    };
    let plant = make_plant(cfg)?;
    let rows = sensitivity_sweep(&plant, &cfg.controller.structure, &cfg.sweep.poles, &scenario)?;
    let mut csv = String::from("pole,cutoff_hz,ms,unstable\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            r.pole,
            r.cutoff_hz,
            r.ms.map(|v| v.to_string()).unwrap_or_default(),
            r.unstable
        ));
        log::info!("pole {:.6}: {:?}", r.pole, r.ms);
    }
    write_file(&out.join("sweep.csv"), csv.as_bytes())
}

/// Reads a closed-loop CSV (`t,u,y,p,g` plus optional `r` and `yd`).
pub fn read_closed_loop(text: &str) -> Result<(ClosedLoopLog, Option<SampledSignal>), SignalError> {
    let mut cols = read_columns(text.as_bytes(), &["u", "y", "p", "g"])?;
    let g = cols.pop().unwrap();
    let p = cols.pop().unwrap();
    let y = cols.pop().unwrap();
    let u = cols.pop().unwrap();
    let optional = |name: &str| read_columns(text.as_bytes(), &[name]).ok().and_then(|mut c| c.pop());
    let log = ClosedLoopLog {
        log: ExperimentLog::new(u, y, p)?,
        g,
        r: optional("r"),
    };
    Ok((log, optional("yd")))
}

fn report(cfg: &Config, out: &Path, path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let (run, yd) = read_closed_loop(&text).map_err(|e| CliError::File {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let target = run.r.clone().unwrap_or_else(|| run.g.clone());
    let rows = loop_metrics(&run, &target, yd.as_ref(), &cfg.mpc.bounds)?;
    write_metrics(&out.join("report_metrics.csv"), &rows)?;

    let y = run.log.y.dense()?;
    let tv = target.dense()?;
    let mut plot = String::from(if yd.is_some() { "t,y,target,yd\n" } else { "t,y,target\n" });
    let ydv = yd.as_ref().map(|s| s.dense()).transpose()?;
    for k in 0..y.len() {
        plot.push_str(&format!("{},{},{}", run.log.y.time(k), y[k], tv.get(k).copied().unwrap_or(f64::NAN)));
        if let Some(d) = &ydv {
            plot.push_str(&format!(",{}", d[k]));
        }
        plot.push('\n');
    }
    write_file(&out.join("plot_output.csv"), plot.as_bytes())?;
    let u = run.log.u.dense()?;
    let du = increments(&u, 0.0);
    let mut plot = String::from("t,u,du\n");
    for k in 0..u.len() {
        plot.push_str(&format!("{},{},{}\n", run.log.u.time(k), u[k], du[k]));
    }
    write_file(&out.join("plot_input.csv"), plot.as_bytes())?;
    println!("{}", summary(&rows.iter().map(|(n, v)| (n.as_str(), *v)).collect::<Vec<_>>()));
    Ok(())
}
