use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use koopreach::control::{simulate_closed_loop, ControlError, Trajectory, TrajectorySummary};
use koopreach::experiment::{
    compute_brs, export_bundle, fit, generate_data, layer_volume_estimate, load_dataset,
    read_json, save_dataset, write_json, Datasets, ExperimentConfig, FitReport, Mode,
};
use koopreach::koopman::KoopmanError;
use koopreach::reach::{BrsResult, LayerStats};
use koopreach::{Error, KoopmanModel};
use log::info;
use nalgebra::DVector;
use serde::Serialize;

/// Data-driven lifted reachability: sample, fit, compute reachable sets,
/// simulate the extracted controller and export plot data.
#[derive(Parser)]
#[command(name = "koopreach", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample transition data.
    GenData(Common),
    /// Fit the global model and bound its error.
    Fit(Common),
    /// Compute the backward reachable set.
    Brs {
        #[command(flatten)]
        common: Common,
        /// `global` or `local`; overrides the config
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Number of backward steps K; overrides the config
        #[arg(long)]
        horizon: Option<usize>,
        /// Split threshold on the 1-norm of local error radii.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the extracted controller from `x0` on the true dynamics.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Initial state, comma separated.
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
    },
    /// Bundle vertex loops, boxes and the trajectory for plotting.
    Export(Common),
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse()
}

/// Failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Io { .. } | Error::Json(_) | Error::Data(_) => 2,
            Error::Koopman(KoopmanError::KsRejected { .. }) => 3,
            Error::Control(
                ControlError::NotInBrs { .. }
                | ControlError::EmptyAdmissible { .. }
                | ControlError::GuaranteeViolation { .. },
            ) => 4,
            Error::Control(ControlError::Csv(_) | ControlError::Corrupt(_)) => 2,
            _ => 1,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

struct Paths {
    dir: PathBuf,
}

impl Paths {
    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

fn prepare(common: &Common) -> Result<(ExperimentConfig, Paths), Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok((cfg, Paths { dir }))
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{} not found; run the earlier pipeline step first", path.display())))
    }
}

fn load_datasets(paths: &Paths) -> Result<Datasets, Failure> {
    let train = paths.file("data.csv");
    require(&train)?;
    let holdout = paths.file("holdout.csv");
    Ok(Datasets {
        train: load_dataset(&train)?,
        holdout: if holdout.exists() { Some(load_dataset(&holdout)?) } else { None },
    })
}

fn cmd_gen_data(common: &Common) -> Result<(), Failure> {
    let (cfg, paths) = prepare(common)?;
    let data = generate_data(&cfg)?;
    save_dataset(&paths.file("data.csv"), &data.train, cfg.system)?;
    if let Some(h) = &data.holdout {
        save_dataset(&paths.file("holdout.csv"), h, cfg.system)?;
    }
    println!("wrote {} training triples to {}", data.train.len(), paths.dir.display());
    Ok(())
}

fn cmd_fit(common: &Common) -> Result<(), Failure> {
    let (cfg, paths) = prepare(common)?;
    let data = load_datasets(&paths)?;
    let (model, report) = fit(&cfg, &data)?;
    write_json(&paths.file("fit_report.json"), &report)?;
    // The report is kept for inspection even when the bound is rejected.
    report.evt.check().map_err(Error::from)?;
    write_json(&paths.file("model.json"), &model)?;
    println!("residual e = {:?}", report.residual);
    println!("error radii = {:?}", report.error_radii);
    Ok(())
}

#[derive(Serialize)]
struct LayerReport {
    layer: usize,
    #[serde(flatten)]
    stats: LayerStats,
    volume_estimate: f64,
}

#[derive(Serialize)]
struct BrsReport {
    mode: Mode,
    horizon_requested: usize,
    horizon_reached: usize,
    models: usize,
    layers: Vec<LayerReport>,
    wall_time_s: f64,
}

const VOLUME_SAMPLES: usize = 20_000;

fn cmd_brs(common: &Common, mode: Option<Mode>, horizon: Option<usize>, threshold: Option<f64>) -> Result<(), Failure> {
    let (mut cfg, paths) = prepare(common)?;
    if let Some(m) = mode {
        cfg.brs.mode = m;
    }
    if let Some(k) = horizon {
        cfg.brs.horizon = k;
    }
    if let Some(t) = threshold {
        cfg.brs.split_threshold = t;
    }
    cfg.validate()?;
    let model_path = paths.file("model.json");
    let report_path = paths.file("fit_report.json");
    require(&model_path)?;
    require(&report_path)?;
    let model: KoopmanModel = read_json(&model_path)?;
    let report: FitReport = read_json(&report_path)?;
    let train = match cfg.brs.mode {
        Mode::Local => load_datasets(&paths)?.train,
        Mode::Global => koopreach::Dataset::new(model.lifting.state_dim(), model.input_dim()),
    };
    let start = Instant::now();
    let r = compute_brs(&cfg, &train, &model, &report)?;
    let wall = start.elapsed().as_secs_f64();
    info!("reachable set computed in {wall:.2} s");
    let domain = cfg.system.spec().state_domain;
    let layers = r
        .stats
        .iter()
        .enumerate()
        .map(|(k, s)| LayerReport {
            layer: k,
            stats: s.clone(),
            volume_estimate: layer_volume_estimate(&r, &domain, k, VOLUME_SAMPLES, cfg.seed),
        })
        .collect();
    write_json(&paths.file("brs.json"), &r)?;
    write_json(
        &paths.file("brs_report.json"),
        &BrsReport {
            mode: cfg.brs.mode,
            horizon_requested: cfg.brs.horizon,
            horizon_reached: r.horizon(),
            models: r.models.len(),
            layers,
            wall_time_s: wall,
        },
    )?;
    println!("{} layers, {} models, {wall:.2} s", r.horizon(), r.models.len());
    Ok(())
}

fn parse_state(text: &str, n: usize) -> Result<DVector<f64>, Failure> {
    let values = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(format!("--x0 `{text}`: {e}")))?;
    if values.len() != n || values.iter().any(|v| !v.is_finite()) {
        return Err(usage(format!("--x0 needs {n} finite comma-separated values")));
    }
    Ok(DVector::from_vec(values))
}

fn load_brs(paths: &Paths) -> Result<BrsResult, Failure> {
    let path = paths.file("brs.json");
    require(&path)?;
    Ok(read_json(&path)?)
}

fn cmd_simulate(common: &Common, x0: &str) -> Result<(), Failure> {
    let (cfg, paths) = prepare(common)?;
    let r = load_brs(&paths)?;
    let x0 = parse_state(x0, r.lifting.state_dim())?;
    let spec = cfg.system.spec();
    let traj = simulate_closed_loop(|x, u| spec.step(x, u), &r, &x0, &spec.target.to_polytope())
        .map_err(Error::from)?;
    let csv_path = paths.file("trajectory.csv");
    let file = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    traj.write_csv(file).map_err(Error::from)?;
    write_json(&paths.file("trajectory.json"), &traj.summary())?;
    println!("reached = {}, steps_used = {}", traj.reached, traj.steps_used);
    Ok(())
}

fn cmd_export(common: &Common) -> Result<(), Failure> {
    let (cfg, paths) = prepare(common)?;
    let r = load_brs(&paths)?;
    let csv_path = paths.file("trajectory.csv");
    let summary_path = paths.file("trajectory.json");
    let traj = if csv_path.exists() && summary_path.exists() {
        let summary: TrajectorySummary = read_json(&summary_path)?;
        let file = fs::File::open(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
        Some(Trajectory::read_csv(file, summary).map_err(Error::from)?)
    } else {
        None
    };
    let bundle = export_bundle(cfg.system, &r, traj.as_ref())?;
    write_json(&paths.file("bundle.json"), &bundle)?;
    println!("wrote {}", paths.file("bundle.json").display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenData(c) => cmd_gen_data(c),
        Command::Fit(c) => cmd_fit(c),
        Command::Brs { common, mode, horizon, threshold } => cmd_brs(common, *mode, *horizon, *threshold),
        Command::Simulate { common, x0 } => cmd_simulate(common, x0),
        Command::Export(c) => cmd_export(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
