//! Benchmark dynamics and dataset generation.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, Sampling};
use crate::polytope::BoxSet;

/// Default ceiling on grid sizes.
pub const DEFAULT_GRID_CAP: u128 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Dynamics {
    /// `ẋ = y`, `ẏ = 2x - 2x³ - 0.5y + u`, classic RK4 with zero-order hold.
    Duffing { dt: f64 },
    /// Inverted pendulum, explicit Euler:
    /// `θ̈ = 3g/(2l) sin θ + 3/(m l²) u`.
    Pendulum { dt: f64, mass: f64, length: f64, gravity: f64 },
}

fn duffing_field(x: f64, y: f64, u: f64) -> (f64, f64) {
    (y, 2.0 * x - 2.0 * x * x * x - 0.5 * y + u)
}

impl Dynamics {
    pub fn state_dim(&self) -> usize {
        2
    }

    pub fn input_dim(&self) -> usize {
        1
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> [f64; 2] {
        match *self {
            Dynamics::Duffing { dt } => {
                let (px, py, u) = (x[0], x[1], u[0]);
                let (k1x, k1y) = duffing_field(px, py, u);
                let (k2x, k2y) = duffing_field(px + 0.5 * dt * k1x, py + 0.5 * dt * k1y, u);
                let (k3x, k3y) = duffing_field(px + 0.5 * dt * k2x, py + 0.5 * dt * k2y, u);
                let (k4x, k4y) = duffing_field(px + dt * k3x, py + dt * k3y, u);
                [
                    px + dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x),
                    py + dt / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y),
                ]
            }
            Dynamics::Pendulum { dt, mass, length, gravity } => {
                let (th, om) = (x[0], x[1]);
                let acc = 1.5 * gravity / length * th.sin() + 3.0 / (mass * length * length) * u[0];
                [th + dt * om, om + dt * acc]
            }
        }
    }
}

/// A benchmark: dynamics plus domain, input set and target.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub name: String,
    pub dynamics: Dynamics,
    pub state_domain: BoxSet,
    pub input_set: BoxSet,
    pub target: BoxSet,
}

impl SystemSpec {
    pub fn duffing() -> Self {
        Self {
            name: "duffing".into(),
            dynamics: Dynamics::Duffing { dt: 0.025 },
            state_domain: BoxSet::from_bounds(&[-0.5, -1.5], &[0.5, 1.5]).unwrap(),
            input_set: BoxSet::from_bounds(&[-5.0], &[5.0]).unwrap(),
            target: BoxSet::from_bounds(&[-0.1, -0.1], &[0.1, 0.1]).unwrap(),
        }
    }

    pub fn pendulum() -> Self {
        Self {
            name: "pendulum".into(),
            dynamics: Dynamics::Pendulum { dt: 0.1, mass: 0.1, length: 1.0, gravity: 10.0 },
            state_domain: BoxSet::from_bounds(&[0.0, -6.0], &[1.5 * std::f64::consts::PI, 4.0])
                .unwrap(),
            input_set: BoxSet::from_bounds(&[-0.35], &[0.35]).unwrap(),
            target: BoxSet::from_bounds(&[0.0, -0.5], &[0.2, 0.5]).unwrap(),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_domain.dim()
    }

    pub fn input_dim(&self) -> usize {
        self.input_set.dim()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&self.dynamics.step(x.as_slice(), u.as_slice()))
    }

    /// Joint `(x, u)` box.
    pub fn xu_box(&self) -> BoxSet {
        BoxSet::new(
            DVector::from_iterator(
                self.state_dim() + self.input_dim(),
                self.state_domain.center.iter().chain(self.input_set.center.iter()).copied(),
            ),
            DVector::from_iterator(
                self.state_dim() + self.input_dim(),
                self.state_domain.radii.iter().chain(self.input_set.radii.iter()).copied(),
            ),
        )
        .expect("consistent boxes")
    }

    /// `N` i.i.d. uniform samples of `S_x × S_u`.
    pub fn sample_random(&self, count: usize, seed: u64) -> Dataset {
        let (n, m) = (self.state_dim(), self.input_dim());
        let xu = self.xu_box();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ds = Dataset::with_capacity(n, m, count);
        for _ in 0..count {
            let s = xu.sample(&mut rng);
            let next = self.dynamics.step(&s.as_slice()[..n], &s.as_slice()[n..]);
            ds.push(&s.as_slice()[..n], &s.as_slice()[n..], &next).expect("dims");
        }
        ds.sampling = Sampling::Random { seed };
        ds
    }

    /// Tensor grid over `S_x × S_u` with the given spacings (states first).
    pub fn sample_grid(&self, spacings: &[f64], cap: u128) -> Result<Dataset, DataError> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let xu = self.xu_box();
        if spacings.len() != n + m {
            return Err(DataError::DimensionMismatch { expected: n + m, found: spacings.len() });
        }
        let lo: Vec<f64> = xu.lower().iter().copied().collect();
        let hi: Vec<f64> = xu.upper().iter().copied().collect();
        let axes: Vec<Vec<f64>> = (0..n + m)
            .map(|j| grid_axis(lo[j], hi[j], spacings[j]))
            .collect();
        let count: u128 = axes.iter().map(|a| a.len() as u128).product();
        if count > cap {
            return Err(DataError::GridTooLarge { count, cap });
        }
        let mut ds = Dataset::with_capacity(n, m, count as usize);
        let mut idx = vec![0usize; n + m];
        let mut point = vec![0.0; n + m];
        'outer: loop {
            for j in 0..n + m {
                point[j] = axes[j][idx[j]];
            }
            let next = self.dynamics.step(&point[..n], &point[n..]);
            ds.push(&point[..n], &point[n..], &next)?;
            // Last coordinate varies fastest.
            for j in (0..n + m).rev() {
                idx[j] += 1;
                if idx[j] < axes[j].len() {
                    continue 'outer;
                }
                idx[j] = 0;
            }
            break;
        }
        ds.sampling = Sampling::Grid { lo, hi, axes };
        Ok(ds)
    }
}

/// `⌊span/δ⌋ + 1` values spaced by `δ`, centered in `[lo, hi]` so that any
/// leftover span is split evenly between both ends.
pub fn grid_axis(lo: f64, hi: f64, spacing: f64) -> Vec<f64> {
    assert!(spacing > 0.0, "grid spacing must be positive");
    let span = hi - lo;
    let steps = (span / spacing + 1e-9).floor() as usize;
    let slack = (span - steps as f64 * spacing).max(0.0);
    let start = lo + 0.5 * slack;
    (0..=steps).map(|k| start + k as f64 * spacing).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn duffing_equilibrium_and_symmetry() {
        let d = SystemSpec::duffing().dynamics;
        assert_eq!(d.step(&[0.0, 0.0], &[0.0]), [0.0, 0.0]);
        let a = d.step(&[0.3, -0.7], &[1.2]);
        let b = d.step(&[-0.3, 0.7], &[-1.2]);
        assert_eq!(a[0], -b[0]);
        assert_eq!(a[1], -b[1]);
    }

    #[test]
    fn duffing_matches_fine_euler() {
        let d = SystemSpec::duffing().dynamics;
        let rk = d.step(&[0.1, 0.0], &[0.0]);
        let (mut x, mut y) = (0.1, 0.0);
        let h = 1e-5;
        for _ in 0..2500 {
            let (dx, dy) = duffing_field(x, y, 0.0);
            x += h * dx;
            y += h * dy;
        }
        assert!((rk[0] - x).abs() < 1e-7, "{} vs {}", rk[0], x);
        assert!((rk[1] - y).abs() < 1e-7, "{} vs {}", rk[1], y);
    }

    #[test]
    fn pendulum_examples() {
        let p = SystemSpec::pendulum().dynamics;
        let s = p.step(&[PI, 0.0], &[0.0]);
        assert_eq!(s[0], PI);
        assert!(s[1].abs() < 1e-14);
        assert_eq!(p.step(&[0.0, 1.0], &[0.0]), [0.1, 1.0]);
        let s = p.step(&[PI / 2.0, 0.0], &[0.0]);
        assert_relative_eq!(s[1], 1.5, epsilon = 1e-14);
        let s = p.step(&[0.0, 0.0], &[1.0]);
        assert_relative_eq!(s[1], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn grid_axis_examples() {
        assert_eq!(grid_axis(0.0, 1.0, 0.5), vec![0.0, 0.5, 1.0]);
        let a = grid_axis(0.0, 1.0, 0.3);
        assert_eq!(a.len(), 4);
        assert_relative_eq!(a[0], 0.05, epsilon = 1e-12);
        assert_relative_eq!(1.0 - a[3], 0.05, epsilon = 1e-12);
        assert_eq!(grid_axis(2.0, 2.0, 0.1), vec![2.0]);
    }

    #[test]
    fn pendulum_grid_count() {
        let spec = SystemSpec::pendulum();
        let ds = spec.sample_grid(&[0.04, 0.04, 0.08], DEFAULT_GRID_CAP).unwrap();
        assert_eq!(ds.len(), 118 * 251 * 9);
        assert!(matches!(
            spec.sample_grid(&[0.04, 0.04, 0.08], 1000),
            Err(DataError::GridTooLarge { .. })
        ));
    }

    #[test]
    fn random_samples_in_domain_and_deterministic() {
        let spec = SystemSpec::duffing();
        let ds = spec.sample_random(10_000, 9);
        assert_eq!(ds, spec.sample_random(10_000, 9));
        let xu = spec.xu_box();
        let mut mean = [0.0; 2];
        for k in 0..ds.len() {
            assert!(xu.contains(&ds.xu_vec(k), 0.0));
            assert_eq!(ds.x_plus(k), &spec.dynamics.step(ds.x(k), ds.u(k)));
            mean[0] += ds.x(k)[0] / ds.len() as f64;
            mean[1] += ds.x(k)[1] / ds.len() as f64;
        }
        // Uniform on [-r, r]: sd of the mean is r / sqrt(3N).
        assert!(mean[0].abs() < 3.0 * 0.5 / (3.0f64 * 1e4).sqrt());
        assert!(mean[1].abs() < 3.0 * 1.5 / (3.0f64 * 1e4).sqrt());
        assert_eq!(spec.sample_random(1, 0).len(), 1);
    }
}
