//! Extreme-value endpoint estimation.
//!
//! Batch maxima `y` are modelled by a three-parameter reverse Weibull law
//! `F(y) = exp(-((μ - y)/σ)^α)` for `y < μ`. The location `μ` is the finite
//! right endpoint and serves as the estimate of the sampled quantity's
//! supremum. Parameters come from maximum likelihood: for fixed `μ` the
//! gaps `μ - y` are Weibull distributed, so `(α, σ)` follow from the usual
//! one-dimensional score equation and `μ` is found by profiling.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvtError {
    #[error("need at least {needed} maxima, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("maximum-likelihood fit did not converge")]
    FitDiverged,
    #[error("non-finite sample")]
    NonFinite,
}

/// Fitted reverse Weibull parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReverseWeibull {
    pub location: f64,
    pub scale: f64,
    pub shape: f64,
}

impl ReverseWeibull {
    pub fn cdf(&self, y: f64) -> f64 {
        if y >= self.location {
            1.0
        } else {
            (-((self.location - y) / self.scale).powf(self.shape)).exp()
        }
    }
}

/// Maxima of consecutive batches; a trailing partial batch is dropped.
pub fn batch_maxima(samples: &[f64], batch_size: usize) -> Vec<f64> {
    samples
        .chunks_exact(batch_size.max(1))
        .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Weibull MLE for positive gaps: returns `(shape, scale, log-likelihood)`.
fn weibull_mle(gaps: &[f64]) -> Option<(f64, f64, f64)> {
    let n = gaps.len() as f64;
    let top = gaps.iter().copied().fold(0.0, f64::max);
    if !(top > 0.0) {
        return None;
    }
    // Work with gaps scaled to max 1; the shape is scale invariant.
    let logs: Vec<f64> = gaps.iter().map(|g| (g / top).ln()).collect();
    let mean_log = logs.iter().sum::<f64>() / n;
    let score = |a: f64| {
        let (mut num, mut den) = (0.0, 0.0);
        for &l in &logs {
            let w = (a * l).exp();
            num += w * l;
            den += w;
        }
        num / den - 1.0 / a - mean_log
    };
    let (mut lo, mut hi) = (1e-4, 1e4);
    if score(lo) > 0.0 || score(hi) < 0.0 {
        return None;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if score(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    let shape = (lo * hi).sqrt();
    let mean_pow = logs.iter().map(|l| (shape * l).exp()).sum::<f64>() / n;
    let scale_unit = mean_pow.powf(1.0 / shape);
    let scale = scale_unit * top;
    let sum_log_gap = logs.iter().sum::<f64>() + n * top.ln();
    let loglik = n * shape.ln() - n * shape * scale.ln() + (shape - 1.0) * sum_log_gap - n;
    loglik.is_finite().then_some((shape, scale, loglik))
}

fn profile(maxima: &[f64], location: f64) -> Option<(f64, f64, f64)> {
    let gaps: Vec<f64> = maxima.iter().map(|y| location - y).collect();
    if gaps.iter().any(|g| !(*g > 0.0)) {
        return None;
    }
    weibull_mle(&gaps)
}

/// Maximum-likelihood reverse Weibull fit. The location is profiled over
/// `max + τ·10^g`, `g ∈ [-8, 2]`, where `τ` is the sample range, then
/// refined by golden-section search in `g`.
pub fn fit_reverse_weibull(maxima: &[f64]) -> Result<ReverseWeibull, EvtError> {
    if maxima.len() < 3 {
        return Err(EvtError::TooFewSamples { needed: 3, got: maxima.len() });
    }
    if maxima.iter().any(|v| !v.is_finite()) {
        return Err(EvtError::NonFinite);
    }
    let top = maxima.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let bottom = maxima.iter().copied().fold(f64::INFINITY, f64::min);
    let mut tau = top - bottom;
    if !(tau > 0.0) {
        tau = top.abs().max(1.0) * 1e-12;
    }
    let loc = |g: f64| top + tau * 10f64.powf(g);
    let ll = |g: f64| profile(maxima, loc(g)).map_or(f64::NEG_INFINITY, |r| r.2);

    let grid: Vec<f64> = (0..=100).map(|k| -8.0 + 0.1 * k as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&g| ll(g)).collect();
    let best = (0..grid.len())
        .filter(|&k| values[k].is_finite())
        .fold(None, |acc: Option<usize>, k| match acc {
            Some(b) if values[b] >= values[k] => Some(b),
            _ => Some(k),
        })
        .ok_or(EvtError::FitDiverged)?;
    let mut a = grid[best.saturating_sub(1)];
    let mut b = grid[(best + 1).min(grid.len() - 1)];
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let (mut fc, mut fd) = (ll(c), ll(d));
    for _ in 0..80 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = ll(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = ll(d);
        }
    }
    let (g, v) = if fc >= fd { (c, fc) } else { (d, fd) };
    let g = if v >= values[best] { g } else { grid[best] };
    let location = loc(g);
    let (shape, scale, _) = profile(maxima, location).ok_or(EvtError::FitDiverged)?;
    Ok(ReverseWeibull { location, scale, shape })
}

/// Two-sided Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(k, &y)| {
            let f = cdf(y);
            (f - k as f64 / n).max((k + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

/// Asymptotic p-value with Stephens' small-sample correction.
pub fn ks_p_value(statistic: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * statistic;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Outcome of a fitted-and-validated endpoint estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EndpointEstimate {
    pub endpoint: f64,
    pub ks_statistic: f64,
    pub ks_p_value: f64,
    pub ks_pass: bool,
    pub fit: Option<ReverseWeibull>,
}

/// Values below this are treated as exactly zero.
pub const ZERO_LEVEL: f64 = 1e-8;

/// Fits on `fit_maxima`, validates on `ks_maxima` at level `alpha`. The
/// endpoint is never below the largest maximum seen in either sample.
pub fn estimate_endpoint(
    fit_maxima: &[f64],
    ks_maxima: &[f64],
    alpha: f64,
) -> Result<EndpointEstimate, EvtError> {
    let observed = fit_maxima
        .iter()
        .chain(ks_maxima)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if observed.abs() < ZERO_LEVEL {
        return Ok(EndpointEstimate {
            endpoint: 0.0,
            ks_statistic: 0.0,
            ks_p_value: 1.0,
            ks_pass: true,
            fit: None,
        });
    }
    let fit = fit_reverse_weibull(fit_maxima)?;
    let stat = ks_statistic(ks_maxima, |y| fit.cdf(y));
    let p = ks_p_value(stat, ks_maxima.len());
    Ok(EndpointEstimate {
        endpoint: fit.location.max(observed),
        ks_statistic: stat,
        ks_p_value: p,
        ks_pass: p > alpha,
        fit: Some(fit),
    })
}
