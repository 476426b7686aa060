//! Experiment configuration and the end-to-end pipeline stages shared by
//! the command-line front end and the integration tests.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::Trajectory;
use crate::data::{Dataset, Sampling};
use crate::koopman::{
    dispersion, error_bound_evt_report, error_set_global, fit_global, lipschitz_evt_report,
    state_dispersion, Dispersion, EvtParams, GlobalFit, KoopmanModel, LipschitzEstimate,
};
use crate::lifting::Lifting;
use crate::polytope::{BoxSet, PolytopeError};
use crate::reach::{brs_global, brs_local, BrsResult, LocalBrsConfig};
use crate::systems::{SystemSpec, DEFAULT_GRID_CAP};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    Duffing,
    Pendulum,
}

impl SystemName {
    pub fn spec(self) -> SystemSpec {
        match self {
            SystemName::Duffing => SystemSpec::duffing(),
            SystemName::Pendulum => SystemSpec::pendulum(),
        }
    }

    pub fn state_names(self) -> Vec<String> {
        let names: &[&str] = match self {
            SystemName::Duffing => &["x", "y"],
            SystemName::Pendulum => &["theta", "theta_dot"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingConfig {
    /// Uniform samples; `holdout` extra triples feed the direct error bound.
    Random {
        count: usize,
        #[serde(default)]
        holdout: usize,
    },
    /// Tensor grid with the given spacings, states first.
    Grid {
        spacings: Vec<f64>,
        #[serde(default = "default_grid_cap")]
        cap: u64,
    },
}

fn default_grid_cap() -> u64 {
    DEFAULT_GRID_CAP as u64
}

/// How the error box `W` is obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorRoute {
    /// Extreme-value bound on held-out prediction errors.
    Direct,
    /// Extreme-value Lipschitz constant of the error, times the dispersion,
    /// plus the fit residual.
    Lipschitz,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorConfig {
    pub route: ErrorRoute,
    pub n_fit: usize,
    pub batch_size: usize,
    pub n_ks: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_pair_distance")]
    pub pair_distance: f64,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_pair_distance() -> f64 {
    0.01
}

impl ErrorConfig {
    pub fn evt_params(&self) -> EvtParams {
        EvtParams {
            n_fit: self.n_fit,
            batch_size: self.batch_size,
            n_ks: self.n_ks,
            alpha: self.alpha,
            pair_distance: self.pair_distance,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Global,
    Local,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "global" => Ok(Mode::Global),
            "local" => Ok(Mode::Local),
            other => Err(format!("unknown mode `{other}`, expected global or local")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrsConfig {
    pub mode: Mode,
    pub horizon: usize,
    #[serde(default = "default_threshold")]
    pub split_threshold: f64,
    #[serde(default)]
    pub adapt_b: bool,
    #[serde(default = "default_max_splits")]
    pub max_splits: usize,
}

fn default_threshold() -> f64 {
    0.18
}

fn default_max_splits() -> usize {
    crate::reach::DEFAULT_MAX_SPLITS
}

/// Everything one run needs. Seeds of the individual stages are derived
/// from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub system: SystemName,
    pub lifting: Lifting,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub sampling: SamplingConfig,
    pub error: ErrorConfig,
    pub brs: BrsConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, Error> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        let spec = self.system.spec();
        let (n, m) = (spec.state_dim(), spec.input_dim());
        if self.lifting.state_dim() != n {
            return bad(format!("lifting has {} state coordinates, system has {n}", self.lifting.state_dim()));
        }
        let e = &self.error;
        if !(e.alpha > 0.0 && e.alpha < 1.0) {
            return bad(format!("error.alpha = {} must lie in (0, 1)", e.alpha));
        }
        if e.batch_size == 0 || e.n_fit == 0 || e.n_ks == 0 {
            return bad("error.n_fit, error.batch_size and error.n_ks must be positive".into());
        }
        if !(e.pair_distance > 0.0) {
            return bad(format!("error.pair_distance = {} must be positive", e.pair_distance));
        }
        match &self.sampling {
            SamplingConfig::Random { count, holdout } => {
                if *count == 0 {
                    return bad("sampling.count must be positive".into());
                }
                if e.route == ErrorRoute::Direct && *holdout < e.n_fit + e.n_ks {
                    return bad(format!(
                        "sampling.holdout = {holdout} is smaller than error.n_fit + error.n_ks = {}",
                        e.n_fit + e.n_ks
                    ));
                }
            }
            SamplingConfig::Grid { spacings, .. } => {
                if spacings.len() != n + m {
                    return bad(format!("sampling.spacings needs {} values, got {}", n + m, spacings.len()));
                }
                if spacings.iter().any(|s| !(*s > 0.0)) {
                    return bad("sampling.spacings must be positive".into());
                }
                if e.route == ErrorRoute::Direct {
                    return bad("error.route = \"direct\" needs random sampling with a holdout".into());
                }
            }
        }
        let b = &self.brs;
        if b.horizon == 0 {
            return bad("brs.horizon must be at least 1".into());
        }
        if !(b.split_threshold > 0.0) {
            return bad(format!("brs.split_threshold = {} must be positive", b.split_threshold));
        }
        if b.mode == Mode::Local && e.route != ErrorRoute::Lipschitz {
            return bad("brs.mode = \"local\" needs error.route = \"lipschitz\"".into());
        }
        Ok(())
    }

    fn data_seed(&self) -> u64 {
        self.seed
    }

    fn holdout_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    fn evt_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }
}

/// Training data plus the optional holdout for the direct error bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Dataset,
    pub holdout: Option<Dataset>,
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<Datasets, Error> {
    let spec = cfg.system.spec();
    match &cfg.sampling {
        SamplingConfig::Random { count, holdout } => Ok(Datasets {
            train: spec.sample_random(*count, cfg.data_seed()),
            holdout: (*holdout > 0).then(|| spec.sample_random(*holdout, cfg.holdout_seed())),
        }),
        SamplingConfig::Grid { spacings, cap } => Ok(Datasets {
            train: spec.sample_grid(spacings, *cap as u128)?,
            holdout: None,
        }),
    }
}

/// Side file stored next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub system: SystemName,
    pub rows: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub sampling: Sampling,
}

fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Writes `path` and its `.meta.json` side file.
pub fn save_dataset(path: &Path, ds: &Dataset, system: SystemName) -> Result<(), Error> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    ds.write_csv(std::io::BufWriter::new(file))?;
    let meta = DatasetMeta {
        system,
        rows: ds.len(),
        state_dim: ds.state_dim(),
        input_dim: ds.input_dim(),
        sampling: ds.sampling.clone(),
    };
    write_json(&meta_path(path), &meta)
}

/// Reads a dataset CSV; sampling metadata is restored when the side file
/// exists and agrees with the data.
pub fn load_dataset(path: &Path) -> Result<Dataset, Error> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut ds = Dataset::read_csv(std::io::BufReader::new(file))?;
    let meta = meta_path(path);
    if meta.exists() {
        let meta: DatasetMeta = read_json(&meta)?;
        if meta.rows == ds.len() && meta.state_dim == ds.state_dim() && meta.input_dim == ds.input_dim() {
            ds.sampling = meta.sampling;
        }
    }
    Ok(ds)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Everything the fit stage learned besides the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub system: SystemName,
    pub samples: usize,
    pub lifting: Lifting,
    /// Min-max residual `e` per lifted row.
    pub residual: Vec<f64>,
    /// Residual center `c*`.
    pub center: Vec<f64>,
    pub route: ErrorRoute,
    /// Radii of `W`.
    pub error_radii: Vec<f64>,
    /// Extreme-value estimates: error bounds for the direct route,
    /// Lipschitz constants of the error for the Lipschitz route.
    pub evt: LipschitzEstimate,
    pub dispersion: Option<Dispersion>,
    pub state_dispersion: Option<Dispersion>,
    /// Lipschitz constant of the lifting over `S_x`.
    pub lifting_lipschitz: f64,
}

impl FitReport {
    /// Lipschitz constants of the error, when the route produced them.
    pub fn error_lipschitz(&self) -> Option<&[f64]> {
        (self.route == ErrorRoute::Lipschitz).then_some(self.evt.per_component.as_slice())
    }
}

/// Global fit plus error box. KS rejections are recorded in the report,
/// not raised; see [`LipschitzEstimate::check`].
pub fn fit(cfg: &ExperimentConfig, data: &Datasets) -> Result<(KoopmanModel, FitReport), Error> {
    let spec = cfg.system.spec();
    let lifting = &cfg.lifting;
    let train = &data.train;
    let global = fit_global(train, lifting)?;
    info!("global fit: residual {:?}", global.residual.as_slice());
    let params = cfg.error.evt_params();
    let lifting_lipschitz = lifting.lipschitz_constant(&spec.state_domain)?;
    let xu = spec.xu_box();
    let (w, evt, disp, sdisp) = match cfg.error.route {
        ErrorRoute::Direct => {
            let holdout = data
                .holdout
                .as_ref()
                .ok_or_else(|| Error::Config("direct error route needs a holdout dataset".into()))?;
            let est = error_bound_evt_report(holdout, lifting, &global.a, &global.b, &global.center, &params)?;
            let w = BoxSet::new(global.center.clone(), DVector::from_vec(est.per_component.clone()))?;
            (w, est, None, None)
        }
        ErrorRoute::Lipschitz => {
            let est = lipschitz_evt_report(
                error_function(&spec, lifting, &global),
                &xu,
                &params,
                cfg.evt_seed(),
            )?;
            let disp = dispersion(train, &xu.to_polytope())?;
            let sdisp = state_dispersion(train, &spec.state_domain.to_polytope())?;
            let w = error_set_global(&global.residual, &global.center, &est.per_component, disp.value)?;
            (w, est, Some(disp), Some(sdisp))
        }
    };
    let report = FitReport {
        system: cfg.system,
        samples: train.len(),
        lifting: lifting.clone(),
        residual: global.residual.iter().copied().collect(),
        center: global.center.iter().copied().collect(),
        route: cfg.error.route,
        error_radii: w.radii.iter().copied().collect(),
        evt,
        dispersion: disp,
        state_dispersion: sdisp,
        lifting_lipschitz,
    };
    let model = global.into_model(lifting.clone(), w, xu.to_polytope())?;
    Ok((model, report))
}

/// `(x, u) ↦ ψ(f(x, u)) - A ψ(x) - B u`.
pub fn error_function<'a>(
    spec: &'a SystemSpec,
    lifting: &'a Lifting,
    global: &'a GlobalFit,
) -> impl Fn(&DVector<f64>) -> DVector<f64> + 'a {
    let n = spec.state_dim();
    move |xu: &DVector<f64>| {
        let x = xu.rows(0, n).into_owned();
        let u = xu.rows(n, xu.len() - n).into_owned();
        let next = spec.step(&x, &u);
        lifting.lift_unchecked(&next) - &global.a * lifting.lift_unchecked(&x) - &global.b * u
    }
}

/// Reachable set for the configured mode.
pub fn compute_brs(
    cfg: &ExperimentConfig,
    train: &Dataset,
    model: &KoopmanModel,
    report: &FitReport,
) -> Result<BrsResult, Error> {
    let spec = cfg.system.spec();
    let s_x = spec.state_domain.to_polytope();
    let s_u = spec.input_set.to_polytope();
    let target = spec.target.to_polytope();
    let horizon = cfg.brs.horizon;
    match cfg.brs.mode {
        Mode::Global => Ok(brs_global(model, &target, &s_x, &s_u, horizon)?),
        Mode::Local => {
            let lip = report
                .error_lipschitz()
                .ok_or_else(|| Error::Config("local mode needs Lipschitz constants of the error".into()))?;
            let (disp, sdisp) = match (report.dispersion, report.state_dispersion) {
                (Some(d), Some(s)) => (d.value, s.value),
                _ => return Err(Error::Config("fit report lacks dispersion values".into())),
            };
            let global = GlobalFit {
                a: model.a.clone(),
                b: model.b.clone(),
                center: DVector::from_column_slice(&report.center),
                residual: DVector::from_column_slice(&report.residual),
            };
            let local = LocalBrsConfig {
                global: &global,
                error_lipschitz: lip,
                lifting_lipschitz: report.lifting_lipschitz,
                dispersion: disp,
                state_dispersion: sdisp,
                split_threshold: cfg.brs.split_threshold,
                adapt_b: cfg.brs.adapt_b,
                max_splits: cfg.brs.max_splits,
            };
            Ok(brs_local(train, &model.lifting, &local, &target, &s_x, &s_u, horizon)?)
        }
    }
}

/// Monte-Carlo estimate of the state-space volume of `{x | ψ(x) ∈ Z_k}`.
pub fn layer_volume_estimate(r: &BrsResult, domain: &BoxSet, k: usize, samples: usize, seed: u64) -> f64 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    if samples == 0 {
        return 0.0;
    }
    let hits = (0..samples)
        .filter(|_| r.membership(&domain.sample(&mut rng), k).is_some())
        .count();
    hits as f64 / samples as f64 * domain.volume()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl From<&BoxSet> for Bounds {
    fn from(b: &BoxSet) -> Self {
        Bounds { lo: b.lower().iter().copied().collect(), hi: b.upper().iter().copied().collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportPiece {
    pub piece_id: usize,
    pub model_id: Option<usize>,
    pub target_piece_id: Option<usize>,
    /// Counter-clockwise vertices of the piece's state projection.
    #[serde(rename = "loop")]
    pub vertices: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportTrajectory {
    pub states: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    pub reached: bool,
    pub steps_used: usize,
}

impl From<&Trajectory> for ExportTrajectory {
    fn from(t: &Trajectory) -> Self {
        let rows = |v: &[DVector<f64>]| v.iter().map(|x| x.iter().copied().collect()).collect();
        ExportTrajectory {
            states: rows(&t.states),
            inputs: rows(&t.inputs),
            reached: t.reached,
            steps_used: t.steps_used,
        }
    }
}

/// Plot data for a planar system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportBundle {
    pub system: SystemName,
    pub state_names: Vec<String>,
    pub domain: Bounds,
    pub target: Bounds,
    pub layers: Vec<Vec<ExportPiece>>,
    pub trajectory: Option<ExportTrajectory>,
}

/// Projects every piece to the state plane and lists its vertex loop.
/// Pieces with an empty or unbounded projection get an empty loop.
pub fn export_bundle(
    system: SystemName,
    r: &BrsResult,
    trajectory: Option<&Trajectory>,
) -> Result<ExportBundle, Error> {
    let spec = system.spec();
    let n = r.lifting.state_dim();
    if n != 2 {
        return Err(Error::Config(format!("export needs a planar system, state dimension is {n}")));
    }
    let layers = r
        .layers
        .iter()
        .map(|layer| {
            layer
                .iter()
                .enumerate()
                .map(|(piece_id, piece)| {
                    let shadow = piece.polytope.project(&[0, 1])?.intersect(&r.state_constraints)?;
                    let vertices = match shadow.vertex_loop_2d() {
                        Ok(v) => v,
                        Err(PolytopeError::UnboundedPolytope) => Vec::new(),
                        Err(e) => return Err(e),
                    };
                    Ok(ExportPiece {
                        piece_id,
                        model_id: piece.model_id,
                        target_piece_id: piece.target_piece_id,
                        vertices,
                    })
                })
                .collect::<Result<Vec<_>, PolytopeError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ExportBundle {
        system,
        state_names: system.state_names(),
        domain: (&spec.state_domain).into(),
        target: (&spec.target).into(),
        layers,
        trajectory: trajectory.map(Into::into),
    })
}

/// Configuration matching the first experiment: random data, direct error
/// bound from 200 fitting and 50 test maxima, one global model, horizon 10.
pub fn duffing_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 1,
        system: SystemName::Duffing,
        lifting: Lifting::parse(&["x1", "x2", "pow(x1,3)"]).expect("valid lifting"),
        output_dir: PathBuf::from("out/duffing"),
        sampling: SamplingConfig::Random { count: 1000, holdout: 5000 },
        error: ErrorConfig {
            route: ErrorRoute::Direct,
            n_fit: 4000,
            batch_size: 20,
            n_ks: 1000,
            alpha: 0.05,
            pair_distance: 0.01,
        },
        brs: BrsConfig {
            mode: Mode::Global,
            horizon: 10,
            split_threshold: 0.18,
            adapt_b: false,
            max_splits: default_max_splits(),
        },
    }
}

/// Configuration matching the second experiment: grid data, Lipschitz
/// error route, local models, horizon 15.
pub fn pendulum_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: 1,
        system: SystemName::Pendulum,
        lifting: Lifting::parse(&["x1", "x2", "sin(x1)"]).expect("valid lifting"),
        output_dir: PathBuf::from("out/pendulum"),
        sampling: SamplingConfig::Grid { spacings: vec![0.04, 0.04, 0.08], cap: default_grid_cap() },
        error: ErrorConfig {
            route: ErrorRoute::Lipschitz,
            n_fit: 40_000,
            batch_size: 50,
            n_ks: 10_000,
            alpha: 0.05,
            pair_distance: 0.01,
        },
        brs: BrsConfig {
            mode: Mode::Local,
            horizon: 15,
            split_threshold: 0.18,
            adapt_b: false,
            max_splits: default_max_splits(),
        },
    }
}
