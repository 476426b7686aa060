//! Data-driven Koopman over-approximations.
//!
//! Under the infinity norm every fitting problem splits into one min-max
//! (Chebyshev) regression per lifted coordinate. Those are linear programs
//! whose row count equals twice the dataset size, so they are solved by
//! constraint generation: a small working subset is solved exactly, the
//! worst-violated points are added, and the loop stops once no point outside
//! the working set exceeds the working optimum.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::data::{DataError, Dataset, Sampling};
use crate::evt::{self, EndpointEstimate, EvtError};
use crate::lifting::{Lifting, LiftingError};
use crate::lp::{self, LinearProgram, LpError, LpStatus};
use crate::polytope::{BoxSet, HPolytope, PolytopeError};

#[derive(Debug, Error)]
pub enum KoopmanError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("insufficient excitation: {0}")]
    RankDeficientData(String),
    #[error("no data point survives the restriction")]
    EmptyRestriction,
    #[error("KS test rejected the extreme-value fit of component {component} (D = {statistic:.4}, p = {p_value:.4})")]
    KsRejected { component: usize, statistic: f64, p_value: f64 },
    #[error("extreme-value fit diverged for component {component}: {source}")]
    FitDiverged { component: usize, source: EvtError },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Lifting(#[from] LiftingError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Lifted copies of a dataset: `z = ψ(x)`, `u`, `zp = ψ(x⁺)`, one row per
/// triple.
#[derive(Debug, Clone)]
pub struct LiftedData {
    pub z: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub zp: DMatrix<f64>,
}

impl LiftedData {
    pub fn new(ds: &Dataset, lifting: &Lifting) -> Result<Self, KoopmanError> {
        if ds.state_dim() != lifting.state_dim() {
            return Err(KoopmanError::DimensionMismatch {
                expected: lifting.state_dim(),
                found: ds.state_dim(),
            });
        }
        let (n_pts, p, m) = (ds.len(), lifting.lifted_dim(), ds.input_dim());
        let mut z = DMatrix::zeros(n_pts, p);
        let mut zp = DMatrix::zeros(n_pts, p);
        let mut u = DMatrix::zeros(n_pts, m);
        for k in 0..n_pts {
            let lz = lifting.lift_unchecked(&ds.x_vec(k));
            let lzp = lifting.lift_unchecked(&ds.x_plus_vec(k));
            for j in 0..p {
                z[(k, j)] = lz[j];
                zp[(k, j)] = lzp[j];
            }
            for j in 0..m {
                u[(k, j)] = ds.u(k)[j];
            }
        }
        Ok(Self { z, u, zp })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `ψ(x⁺) - A ψ(x) - B u` for every triple (rows).
    pub fn residuals(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        &self.zp - &self.z * a.transpose() - &self.u * b.transpose()
    }
}

/// Solution of one min-max row problem.
#[derive(Debug, Clone)]
struct MinMaxRow {
    theta: DVector<f64>,
    center: f64,
    half_range: f64,
}

/// `min t + Σ_j w_j |θ_j - θ̄_j|` subject to `|y_k - φ_k θ - c| <= t`.
struct MinMaxProblem<'a> {
    phi: &'a DMatrix<f64>,
    y: &'a DVector<f64>,
    anchor: Option<(&'a DVector<f64>, &'a DVector<f64>)>,
}

const CG_MAX_ROUNDS: usize = 500;

impl MinMaxProblem<'_> {
    fn solve(&self) -> Result<MinMaxRow, KoopmanError> {
        let n_pts = self.phi.nrows();
        let q = self.phi.ncols();
        if n_pts == 0 {
            return Err(KoopmanError::EmptyDataset);
        }
        let penalized: Vec<usize> = match self.anchor {
            Some((_, w)) => (0..q).filter(|&j| w[j] > 0.0).collect(),
            None => Vec::new(),
        };
        let mut target = (8 * (q + 2)).max(64).min(n_pts);
        let mut in_set = vec![false; n_pts];
        let mut working: Vec<usize> = Vec::new();
        let add_spread = |count: usize, in_set: &mut Vec<bool>, working: &mut Vec<usize>| {
            for s in 0..count {
                let k = s * n_pts / count;
                if !in_set[k] {
                    in_set[k] = true;
                    working.push(k);
                }
            }
        };
        add_spread(target, &mut in_set, &mut working);

        let y_scale = self.y.amax().max(1.0);
        for _ in 0..CG_MAX_ROUNDS {
            let lp = self.working_lp(&working, &penalized);
            let sol = lp::solve(&lp)?;
            match sol.status {
                LpStatus::Optimal => {}
                LpStatus::Unbounded if working.len() < n_pts => {
                    target = (target * 2).min(n_pts);
                    add_spread(target, &mut in_set, &mut working);
                    if target == n_pts {
                        for (k, flag) in in_set.iter_mut().enumerate() {
                            if !*flag {
                                *flag = true;
                                working.push(k);
                            }
                        }
                    }
                    continue;
                }
                LpStatus::Unbounded => {
                    return Err(KoopmanError::RankDeficientData(
                        "min-max regression is unbounded".into(),
                    ))
                }
                LpStatus::Infeasible => return Err(LpError::NumericalFailure(sol.iterations).into()),
            }
            let point = sol.point.expect("optimal point");
            let theta = point.rows(0, q).into_owned();
            let (c_lp, t_lp) = (point[q], point[q + 1]);
            let resid = self.y - self.phi * &theta;
            let tol = 1e-10 * y_scale;
            let mut violators: Vec<(f64, usize)> = (0..n_pts)
                .filter(|&k| !in_set[k])
                .map(|k| ((resid[k] - c_lp).abs() - t_lp, k))
                .filter(|(v, _)| *v > tol)
                .collect();
            if violators.is_empty() {
                let (lo, hi) = resid
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &r| (l.min(r), h.max(r)));
                return Ok(MinMaxRow {
                    theta,
                    center: 0.5 * (hi + lo),
                    half_range: 0.5 * (hi - lo),
                });
            }
            violators.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(_, k) in violators.iter().take(4 * (q + 2)) {
                in_set[k] = true;
                working.push(k);
            }
        }
        Err(LpError::NumericalFailure(CG_MAX_ROUNDS).into())
    }

    fn working_lp(&self, working: &[usize], penalized: &[usize]) -> LinearProgram {
        let q = self.phi.ncols();
        let nv = q + 2 + penalized.len();
        let rows = 2 * working.len() + 2 * penalized.len();
        let mut g = DMatrix::zeros(rows, nv);
        let mut h = DVector::zeros(rows);
        for (r, &k) in working.iter().enumerate() {
            for j in 0..q {
                g[(2 * r, j)] = self.phi[(k, j)];
                g[(2 * r + 1, j)] = -self.phi[(k, j)];
            }
            g[(2 * r, q)] = 1.0;
            g[(2 * r + 1, q)] = -1.0;
            g[(2 * r, q + 1)] = -1.0;
            g[(2 * r + 1, q + 1)] = -1.0;
            h[2 * r] = self.y[k];
            h[2 * r + 1] = -self.y[k];
        }
        let mut objective = DVector::zeros(nv);
        objective[q + 1] = 1.0;
        if let Some((anchor, weights)) = self.anchor {
            let base = 2 * working.len();
            for (s, &j) in penalized.iter().enumerate() {
                let (r0, r1) = (base + 2 * s, base + 2 * s + 1);
                g[(r0, j)] = 1.0;
                g[(r0, q + 2 + s)] = -1.0;
                h[r0] = anchor[j];
                g[(r1, j)] = -1.0;
                g[(r1, q + 2 + s)] = -1.0;
                h[r1] = -anchor[j];
                objective[q + 2 + s] = weights[j];
            }
        }
        LinearProgram::minimize(objective).with_inequalities(&g, &h)
    }
}

/// Result of the global min-max fit.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalFit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Residual center `c*`.
    pub center: DVector<f64>,
    /// Per-row min-max residual `e`.
    pub residual: DVector<f64>,
}

/// Per-row Chebyshev regression of `ψ(x⁺)` on `(ψ(x), u, 1)`.
pub fn fit_global(ds: &Dataset, lifting: &Lifting) -> Result<GlobalFit, KoopmanError> {
    let (p, m) = (lifting.lifted_dim(), ds.input_dim());
    if ds.is_empty() {
        return Err(KoopmanError::EmptyDataset);
    }
    if ds.len() < p + m + 1 {
        return Err(KoopmanError::RankDeficientData(format!(
            "{} triples for {} unknowns per row",
            ds.len(),
            p + m + 1
        )));
    }
    let data = LiftedData::new(ds, lifting)?;
    let mut phi = DMatrix::zeros(data.len(), p + m);
    phi.columns_mut(0, p).copy_from(&data.z);
    phi.columns_mut(p, m).copy_from(&data.u);
    check_excitation(&phi)?;
    let rows: Vec<Result<MinMaxRow, KoopmanError>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let y = data.zp.column(i).into_owned();
            MinMaxProblem { phi: &phi, y: &y, anchor: None }.solve()
        })
        .collect();
    let mut fit = GlobalFit {
        a: DMatrix::zeros(p, p),
        b: DMatrix::zeros(p, m),
        center: DVector::zeros(p),
        residual: DVector::zeros(p),
    };
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        for j in 0..p {
            fit.a[(i, j)] = row.theta[j];
        }
        for j in 0..m {
            fit.b[(i, j)] = row.theta[p + j];
        }
        fit.center[i] = row.center;
        fit.residual[i] = row.half_range;
    }
    Ok(fit)
}

/// Regressors `[φ 1]` must have a well-conditioned Gram matrix.
fn check_excitation(phi: &DMatrix<f64>) -> Result<(), KoopmanError> {
    let q = phi.ncols();
    let mut aug = DMatrix::from_element(phi.nrows(), q + 1, 1.0);
    aug.columns_mut(0, q).copy_from(phi);
    let gram = aug.transpose() * &aug;
    let eig = SymmetricEigen::new(gram).eigenvalues;
    let top = eig.amax();
    let bottom = eig.iter().copied().fold(f64::INFINITY, f64::min);
    if !(top > 0.0) || bottom <= 1e-12 * top {
        return Err(KoopmanError::RankDeficientData(format!(
            "regressor Gram matrix eigenvalues span [{bottom:.3e}, {top:.3e}]"
        )));
    }
    Ok(())
}

/// Componentwise midrange `c*` and half-range `e` of the residuals of a
/// fixed `(A, B)`.
pub fn residual_center(
    ds: &Dataset,
    lifting: &Lifting,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<(DVector<f64>, DVector<f64>), KoopmanError> {
    if ds.is_empty() {
        return Err(KoopmanError::EmptyDataset);
    }
    let r = LiftedData::new(ds, lifting)?.residuals(a, b);
    Ok(midrange(&r))
}

fn midrange(r: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let p = r.ncols();
    let mut c = DVector::zeros(p);
    let mut e = DVector::zeros(p);
    for i in 0..p {
        let col = r.column(i);
        let (lo, hi) = (col.min(), col.max());
        c[i] = 0.5 * (hi + lo);
        e[i] = 0.5 * (hi - lo);
    }
    (c, e)
}

/// Infinity-norm dispersion of a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub value: f64,
    /// Probe-grid estimate rather than the exact grid value.
    pub estimate: bool,
}

/// Probe points per axis used by the dispersion estimate, chosen so the
/// total probe count stays near `2·10^5`.
pub fn default_probes_per_axis(dim: usize) -> usize {
    ((2e5f64).powf(1.0 / dim as f64).floor() as usize).clamp(2, 500)
}

/// Dispersion of the `(x, u)` samples in `domain`. Exact for grid datasets
/// whose grid box is the bounding box of `domain`.
pub fn dispersion(ds: &Dataset, domain: &HPolytope) -> Result<Dispersion, KoopmanError> {
    let d = ds.state_dim() + ds.input_dim();
    dispersion_over(ds, domain, d, |k, buf| {
        buf[..ds.state_dim()].copy_from_slice(ds.x(k));
        buf[ds.state_dim()..].copy_from_slice(ds.u(k));
    })
}

/// Dispersion of the state samples alone in `domain ⊂ R^n`.
pub fn state_dispersion(ds: &Dataset, domain: &HPolytope) -> Result<Dispersion, KoopmanError> {
    dispersion_over(ds, domain, ds.state_dim(), |k, buf| buf.copy_from_slice(ds.x(k)))
}

fn dispersion_over<F: Fn(usize, &mut [f64])>(
    ds: &Dataset,
    domain: &HPolytope,
    d: usize,
    fill: F,
) -> Result<Dispersion, KoopmanError> {
    if ds.is_empty() {
        return Err(KoopmanError::EmptyDataset);
    }
    if domain.dim() != d {
        return Err(KoopmanError::DimensionMismatch { expected: d, found: domain.dim() });
    }
    let bbox = domain.bounding_box()?;
    if let Sampling::Grid { lo, hi, axes } = &ds.sampling {
        let matches = (0..d).all(|j| {
            (bbox.lower()[j] - lo[j]).abs() <= 1e-9 && (bbox.upper()[j] - hi[j]).abs() <= 1e-9
        });
        if matches {
            let value = (0..d)
                .map(|j| axis_dispersion(&axes[j], lo[j], hi[j]))
                .fold(0.0, f64::max);
            return Ok(Dispersion { value, estimate: false });
        }
    }
    let mut points = vec![0.0; ds.len() * d];
    for k in 0..ds.len() {
        fill(k, &mut points[k * d..(k + 1) * d]);
    }
    let value = probe_dispersion(&points, d, domain, &bbox, default_probes_per_axis(d));
    Ok(Dispersion { value, estimate: true })
}

/// Largest distance from a point of `[lo, hi]` to the nearest grid value.
pub fn axis_dispersion(axis: &[f64], lo: f64, hi: f64) -> f64 {
    let first = axis.first().copied().unwrap_or(lo);
    let last = axis.last().copied().unwrap_or(hi);
    let gap = axis.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    (first - lo).max(hi - last).max(0.5 * gap).max(0.0)
}

/// Max over the probes inside `domain` of the infinity distance to the
/// nearest point. `points` is flat with stride `d`. Probes form a
/// boundary-inclusive grid with `per_axis` values per coordinate over
/// `bbox`.
pub fn probe_dispersion(
    points: &[f64],
    d: usize,
    domain: &HPolytope,
    bbox: &BoxSet,
    per_axis: usize,
) -> f64 {
    let per_axis = per_axis.max(2);
    let (lo, hi) = (bbox.lower(), bbox.upper());
    let total = per_axis.pow(d as u32);
    (0..total)
        .into_par_iter()
        .map(|flat| {
            let mut rem = flat;
            let probe = DVector::from_fn(d, |j, _| {
                let k = rem % per_axis;
                rem /= per_axis;
                lo[j] + (hi[j] - lo[j]) * k as f64 / (per_axis - 1) as f64
            });
            if domain.max_violation(&probe) > 1e-12 {
                return 0.0;
            }
            points
                .chunks_exact(d)
                .map(|pt| {
                    pt.iter()
                        .zip(probe.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max)
}

/// `W = c* ⊕ ⨉[-(L_i b + e_i), L_i b + e_i]`.
pub fn error_set_global(
    residual: &DVector<f64>,
    center: &DVector<f64>,
    lipschitz: &[f64],
    b: f64,
) -> Result<BoxSet, KoopmanError> {
    if residual.len() != lipschitz.len() {
        return Err(KoopmanError::DimensionMismatch {
            expected: residual.len(),
            found: lipschitz.len(),
        });
    }
    let radii = DVector::from_fn(residual.len(), |i, _| lipschitz[i] * b + residual[i]);
    Ok(BoxSet::new(center.clone(), radii)?)
}

/// Sample sizes and test level for extreme-value estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvtParams {
    /// Raw samples used for fitting.
    pub n_fit: usize,
    pub batch_size: usize,
    /// Raw samples held out for the KS test.
    pub n_ks: usize,
    pub alpha: f64,
    /// Infinity distance between the two points of a slope pair.
    pub pair_distance: f64,
}

impl Default for EvtParams {
    fn default() -> Self {
        Self { n_fit: 40_000, batch_size: 50, n_ks: 10_000, alpha: 0.05, pair_distance: 0.01 }
    }
}

impl EvtParams {
    fn validate(&self) -> Result<(), KoopmanError> {
        if self.batch_size == 0 || self.n_fit < 10 * self.batch_size {
            return Err(KoopmanError::InvalidParameter(format!(
                "n_fit = {} must be at least 10 * batch_size = {}",
                self.n_fit,
                10 * self.batch_size
            )));
        }
        if self.n_ks < self.batch_size {
            return Err(KoopmanError::InvalidParameter("n_ks smaller than one batch".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(KoopmanError::InvalidParameter(format!("alpha = {}", self.alpha)));
        }
        Ok(())
    }
}

/// Per-component extreme-value bounds with their goodness-of-fit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub per_component: Vec<f64>,
    pub ks_pass: Vec<bool>,
    pub ks_statistic: Vec<f64>,
    pub ks_p_value: Vec<f64>,
    pub params: EvtParams,
    pub seed: u64,
}

impl LipschitzEstimate {
    fn from_estimates(est: Vec<EndpointEstimate>, params: EvtParams, seed: u64) -> Self {
        Self {
            per_component: est.iter().map(|e| e.endpoint).collect(),
            ks_pass: est.iter().map(|e| e.ks_pass).collect(),
            ks_statistic: est.iter().map(|e| e.ks_statistic).collect(),
            ks_p_value: est.iter().map(|e| e.ks_p_value).collect(),
            params,
            seed,
        }
    }

    /// Exact zero bound, e.g. for an error known to vanish.
    pub fn exact(per_component: Vec<f64>) -> Self {
        let p = per_component.len();
        Self {
            per_component,
            ks_pass: vec![true; p],
            ks_statistic: vec![0.0; p],
            ks_p_value: vec![1.0; p],
            params: EvtParams::default(),
            seed: 0,
        }
    }

    /// First component whose KS test failed.
    pub fn check(&self) -> Result<(), KoopmanError> {
        match self.ks_pass.iter().position(|ok| !ok) {
            Some(i) => Err(KoopmanError::KsRejected {
                component: i,
                statistic: self.ks_statistic[i],
                p_value: self.ks_p_value[i],
            }),
            None => Ok(()),
        }
    }
}

fn endpoint_per_component(
    values: &[Vec<f64>],
    params: &EvtParams,
) -> Result<Vec<EndpointEstimate>, KoopmanError> {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let fit = evt::batch_maxima(&v[..params.n_fit], params.batch_size);
            let ks = evt::batch_maxima(&v[params.n_fit..], params.batch_size);
            evt::estimate_endpoint(&fit, &ks, params.alpha)
                .map_err(|source| KoopmanError::FitDiverged { component: i, source })
        })
        .collect()
}

/// Extreme-value Lipschitz estimates of a vector function over `domain`,
/// without failing on KS rejections. Slopes come from pairs whose second
/// point sits at infinity distance `pair_distance` from the first (before
/// clipping to the domain).
pub fn lipschitz_evt_report<F>(
    func: F,
    domain: &BoxSet,
    params: &EvtParams,
    seed: u64,
) -> Result<LipschitzEstimate, KoopmanError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    params.validate()?;
    let d = domain.dim();
    let (lo, hi) = (domain.lower(), domain.upper());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = params.n_fit + params.n_ks;
    let mut slopes: Vec<Vec<f64>> = Vec::new();
    let mut drawn = 0;
    while drawn < total {
        let x1 = domain.sample(&mut rng);
        let mut dir = DVector::from_fn(d, |_, _| rng.gen_range(-1.0..=1.0));
        let pin = rng.gen_range(0..d);
        dir[pin] = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let x2 = DVector::from_fn(d, |j, _| {
            (x1[j] + params.pair_distance * dir[j]).clamp(lo[j], hi[j])
        });
        let dist = (&x2 - &x1).amax();
        if dist < 1e-3 * params.pair_distance {
            continue;
        }
        let diff = func(&x1) - func(&x2);
        if slopes.is_empty() {
            slopes = vec![Vec::with_capacity(total); diff.len()];
        }
        for (i, s) in slopes.iter_mut().enumerate() {
            s.push(diff[i].abs() / dist);
        }
        drawn += 1;
    }
    let est = endpoint_per_component(&slopes, params)?;
    Ok(LipschitzEstimate::from_estimates(est, *params, seed))
}

/// As [`lipschitz_evt_report`], failing with `KsRejected` when any
/// component's fit is rejected.
pub fn estimate_lipschitz_evt<F>(
    func: F,
    domain: &BoxSet,
    params: &EvtParams,
    seed: u64,
) -> Result<LipschitzEstimate, KoopmanError>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let est = lipschitz_evt_report(func, domain, params, seed)?;
    est.check()?;
    Ok(est)
}

/// Extreme-value bound on `|E_i - c_i|` from held-out triples: the first
/// `n_fit` triples fit, the next `n_ks` validate. Never fails on KS.
pub fn error_bound_evt_report(
    holdout: &Dataset,
    lifting: &Lifting,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    center: &DVector<f64>,
    params: &EvtParams,
) -> Result<LipschitzEstimate, KoopmanError> {
    params.validate()?;
    let need = params.n_fit + params.n_ks;
    if holdout.len() < need {
        return Err(KoopmanError::InvalidParameter(format!(
            "holdout has {} triples, need {need}",
            holdout.len()
        )));
    }
    let r = LiftedData::new(&holdout.subset(&(0..need).collect::<Vec<_>>()), lifting)?
        .residuals(a, b);
    let values: Vec<Vec<f64>> = (0..r.ncols())
        .map(|i| r.column(i).iter().map(|v| (v - center[i]).abs()).collect())
        .collect();
    let est = endpoint_per_component(&values, params)?;
    Ok(LipschitzEstimate::from_estimates(est, *params, 0))
}

/// `W = c* ⊕ ⨉[-ε_i, ε_i]` with `ε` estimated directly from held-out
/// prediction errors.
pub fn error_set_direct(
    holdout: &Dataset,
    lifting: &Lifting,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    center: &DVector<f64>,
    params: &EvtParams,
) -> Result<BoxSet, KoopmanError> {
    let est = error_bound_evt_report(holdout, lifting, a, b, center, params)?;
    est.check()?;
    Ok(BoxSet::new(center.clone(), DVector::from_vec(est.per_component))?)
}

/// Triples whose `(x, u)` lies in `region` inflated by `b` in the infinity
/// norm, i.e. `H_i ξ <= h_i + b ‖H_i‖₁`.
pub fn restrict_dataset(ds: &Dataset, region: &HPolytope, b: f64) -> Result<Dataset, KoopmanError> {
    if b < 0.0 {
        return Err(KoopmanError::InvalidParameter(format!("b = {b}")));
    }
    let d = ds.state_dim() + ds.input_dim();
    if region.dim() != d {
        return Err(KoopmanError::DimensionMismatch { expected: d, found: region.dim() });
    }
    let h = region.normals();
    let inflated = DVector::from_fn(region.num_rows(), |i, _| {
        region.offsets()[i] + b * h.row(i).iter().map(|v| v.abs()).sum::<f64>()
    });
    let keep: Vec<usize> = (0..ds.len())
        .filter(|&k| {
            let xu = ds.x(k).iter().chain(ds.u(k));
            (0..region.num_rows()).all(|i| {
                let lhs: f64 = xu.clone().enumerate().map(|(j, v)| h[(i, j)] * v).sum();
                lhs <= inflated[i] + 1e-12
            })
        })
        .collect();
    if keep.is_empty() {
        return Err(KoopmanError::EmptyRestriction);
    }
    Ok(ds.subset(&keep))
}

/// Inputs of the local calibration LP.
#[derive(Debug, Clone, Copy)]
pub struct LocalFitConfig<'a> {
    pub global_a: &'a DMatrix<f64>,
    pub global_b: &'a DMatrix<f64>,
    /// Lipschitz constant of the lifting.
    pub lifting_lipschitz: f64,
    /// Lipschitz constants of the global prediction error, per row.
    pub error_lipschitz: &'a [f64],
    /// Dispersion of the full dataset over `(x, u)`.
    pub dispersion: f64,
    /// Dispersion over states only; multiplies the `A` deviation when `B`
    /// is held fixed.
    pub state_dispersion: f64,
    pub adapt_b: bool,
}

/// Locally recalibrated model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub center: DVector<f64>,
    /// Min-max residual of the local parameters on the restricted data.
    pub residual: DVector<f64>,
    /// Error radii `ε̄`.
    pub radii: DVector<f64>,
}

/// Per row: minimize the deviation-penalised error bound over `(Ã_i, B̃_i,
/// c̃_i)` on restricted data. With `adapt_b = false`, `B̃ = B` and the `A`
/// deviation is weighted by the state dispersion.
pub fn fit_local(
    data: &Dataset,
    lifting: &Lifting,
    cfg: &LocalFitConfig<'_>,
) -> Result<LocalFit, KoopmanError> {
    let (p, m) = (lifting.lifted_dim(), data.input_dim());
    if data.is_empty() {
        return Err(KoopmanError::EmptyRestriction);
    }
    if cfg.error_lipschitz.len() != p {
        return Err(KoopmanError::DimensionMismatch { expected: p, found: cfg.error_lipschitz.len() });
    }
    if cfg.dispersion < 0.0 || cfg.state_dispersion < 0.0 {
        return Err(KoopmanError::InvalidParameter("negative dispersion".into()));
    }
    let lifted = LiftedData::new(data, lifting)?;
    let q = if cfg.adapt_b { p + m } else { p };
    let mut phi = DMatrix::zeros(lifted.len(), q);
    phi.columns_mut(0, p).copy_from(&lifted.z);
    if cfg.adapt_b {
        phi.columns_mut(p, m).copy_from(&lifted.u);
    }
    let a_weight = cfg.lifting_lipschitz
        * if cfg.adapt_b { cfg.dispersion } else { cfg.state_dispersion };
    let weights = DVector::from_fn(q, |j, _| if j < p { a_weight } else { cfg.dispersion });

    let rows: Vec<Result<(MinMaxRow, f64), KoopmanError>> = (0..p)
        .into_par_iter()
        .map(|i| {
            let mut y = lifted.zp.column(i).into_owned();
            if !cfg.adapt_b {
                y -= &lifted.u * cfg.global_b.row(i).transpose();
            }
            let anchor = DVector::from_fn(q, |j, _| {
                if j < p {
                    cfg.global_a[(i, j)]
                } else {
                    cfg.global_b[(i, j - p)]
                }
            });
            let row = MinMaxProblem { phi: &phi, y: &y, anchor: Some((&anchor, &weights)) }
                .solve()?;
            let deviation: f64 = (0..q)
                .map(|j| weights[j] * (row.theta[j] - anchor[j]).abs())
                .sum();
            Ok((row, deviation))
        })
        .collect();

    let mut fit = LocalFit {
        a: DMatrix::zeros(p, p),
        b: cfg.global_b.clone(),
        center: DVector::zeros(p),
        residual: DVector::zeros(p),
        radii: DVector::zeros(p),
    };
    for (i, row) in rows.into_iter().enumerate() {
        let (row, deviation) = row?;
        for j in 0..p {
            fit.a[(i, j)] = row.theta[j];
        }
        if cfg.adapt_b {
            for j in 0..m {
                fit.b[(i, j)] = row.theta[p + j];
            }
        }
        fit.center[i] = row.center;
        fit.residual[i] = row.half_range;
        fit.radii[i] = deviation + cfg.error_lipschitz[i] * cfg.dispersion + row.half_range;
    }
    Ok(fit)
}

/// Origin of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Global,
    /// Fitted for a piece whose target is piece `parent` of the previous
    /// layer.
    Local { layer: usize, parent: usize },
}

/// `z⁺ = A z + B u + w`, `w ∈ W`, valid for `(x, u) ∈ subdomain`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelRepr", into = "ModelRepr")]
pub struct KoopmanModel {
    pub lifting: Lifting,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub w: BoxSet,
    pub subdomain: HPolytope,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct ModelRepr {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "W")]
    w: BoxSet,
    subdomain: HPolytope,
    lifting: Lifting,
    provenance: Provenance,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>, KoopmanError> {
    if let Some(r) = rows.iter().find(|r| r.len() != ncols) {
        return Err(KoopmanError::DimensionMismatch { expected: ncols, found: r.len() });
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl From<KoopmanModel> for ModelRepr {
    fn from(m: KoopmanModel) -> Self {
        ModelRepr {
            a: rows_of(&m.a),
            b: rows_of(&m.b),
            w: m.w,
            subdomain: m.subdomain,
            lifting: m.lifting,
            provenance: m.provenance,
        }
    }
}

impl TryFrom<ModelRepr> for KoopmanModel {
    type Error = KoopmanError;

    fn try_from(r: ModelRepr) -> Result<Self, Self::Error> {
        let p = r.lifting.lifted_dim();
        let m = r.b.first().map_or(0, Vec::len);
        KoopmanModel::new(
            r.lifting,
            matrix_from_rows(&r.a, p)?,
            matrix_from_rows(&r.b, m)?,
            r.w,
            r.subdomain,
            r.provenance,
        )
    }
}

impl KoopmanModel {
    pub fn new(
        lifting: Lifting,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        w: BoxSet,
        subdomain: HPolytope,
        provenance: Provenance,
    ) -> Result<Self, KoopmanError> {
        let p = lifting.lifted_dim();
        for (expected, found) in [
            (p, a.nrows()),
            (p, a.ncols()),
            (p, b.nrows()),
            (p, w.dim()),
            (lifting.state_dim() + b.ncols(), subdomain.dim()),
        ] {
            if expected != found {
                return Err(KoopmanError::DimensionMismatch { expected, found });
            }
        }
        Ok(Self { lifting, a, b, w, subdomain, provenance })
    }

    pub fn lifted_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// `ψ(x⁺) - A ψ(x) - B u`.
    pub fn prediction_error(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        x_plus: &DVector<f64>,
    ) -> Result<DVector<f64>, KoopmanError> {
        Ok(self.lifting.lift(x_plus)? - &self.a * self.lifting.lift(x)? - &self.b * u)
    }
}

impl GlobalFit {
    pub fn into_model(
        self,
        lifting: Lifting,
        w: BoxSet,
        subdomain: HPolytope,
    ) -> Result<KoopmanModel, KoopmanError> {
        KoopmanModel::new(lifting, self.a, self.b, w, subdomain, Provenance::Global)
    }
}

impl LocalFit {
    pub fn error_set(&self) -> BoxSet {
        BoxSet::new(self.center.clone(), self.radii.clone()).expect("nonnegative radii")
    }

    pub fn into_model(
        self,
        lifting: Lifting,
        subdomain: HPolytope,
        provenance: Provenance,
    ) -> Result<KoopmanModel, KoopmanError> {
        let w = self.error_set();
        KoopmanModel::new(lifting, self.a, self.b, w, subdomain, provenance)
    }
}
