//! Lifting functions built from a small observable library.
//!
//! A [`Lifting`] always starts with the raw state coordinates, so the left
//! inverse is `C = [I_n 0]` and `C ψ(x) = x` holds exactly.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polytope::{BoxSet, HPolytope, PolytopeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LiftingError {
    #[error("cannot parse observable `{0}`")]
    Parse(String),
    #[error("observable {index} must be the coordinate x{expected}")]
    MissingCoordinate { index: usize, expected: usize },
    #[error("observable refers to x{index} but the state has {n} coordinates")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("state dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
}

/// One scalar feature of the state. Indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observable {
    Coordinate(usize),
    Monomial { index: usize, degree: u32 },
    Sine { index: usize, scale: f64 },
    Cosine { index: usize, scale: f64 },
}

impl Observable {
    pub fn index(&self) -> usize {
        match *self {
            Observable::Coordinate(i) => i,
            Observable::Monomial { index, .. }
            | Observable::Sine { index, .. }
            | Observable::Cosine { index, .. } => index,
        }
    }

    pub fn eval(&self, x: &DVector<f64>) -> f64 {
        match *self {
            Observable::Coordinate(i) => x[i],
            Observable::Monomial { index, degree } => x[index].powi(degree as i32),
            Observable::Sine { index, scale } => (scale * x[index]).sin(),
            Observable::Cosine { index, scale } => (scale * x[index]).cos(),
        }
    }

    /// Bound on `|d/dx_i|` over `[lo, hi]` for the observable's coordinate.
    fn slope_bound(&self, lo: f64, hi: f64) -> f64 {
        match *self {
            Observable::Coordinate(_) => 1.0,
            Observable::Monomial { degree, .. } => {
                let r = lo.abs().max(hi.abs());
                degree as f64 * r.powi(degree as i32 - 1)
            }
            Observable::Sine { scale, .. } | Observable::Cosine { scale, .. } => scale.abs(),
        }
    }
}

fn parse_var(s: &str) -> Option<usize> {
    let idx: usize = s.trim().strip_prefix('x')?.parse().ok()?;
    idx.checked_sub(1)
}

fn parse_scaled(s: &str) -> Option<(usize, f64)> {
    match s.split_once('*') {
        Some((k, v)) => Some((parse_var(v)?, k.trim().parse().ok()?)),
        None => Some((parse_var(s)?, 1.0)),
    }
}

impl FromStr for Observable {
    type Err = LiftingError;

    /// Accepts `x1`, `pow(x1,3)`, `sin(x1)`, `cos(x2)`, `sin(2*x1)`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || LiftingError::Parse(s.to_string());
        let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if let Some(i) = parse_var(&t) {
            return Ok(Observable::Coordinate(i));
        }
        let (head, rest) = t.split_once('(').ok_or_else(err)?;
        let args = rest.strip_suffix(')').ok_or_else(err)?;
        match head {
            "pow" => {
                let (v, d) = args.split_once(',').ok_or_else(err)?;
                let degree: u32 = d.parse().map_err(|_| err())?;
                if degree == 0 {
                    return Err(err());
                }
                Ok(Observable::Monomial { index: parse_var(v).ok_or_else(err)?, degree })
            }
            "sin" | "cos" => {
                let (index, scale) = parse_scaled(args).ok_or_else(err)?;
                if !scale.is_finite() {
                    return Err(err());
                }
                Ok(if head == "sin" {
                    Observable::Sine { index, scale }
                } else {
                    Observable::Cosine { index, scale }
                })
            }
            _ => Err(err()),
        }
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let arg = |index: usize, scale: f64| {
            if scale == 1.0 {
                format!("x{}", index + 1)
            } else {
                format!("{}*x{}", scale, index + 1)
            }
        };
        match *self {
            Observable::Coordinate(i) => write!(f, "x{}", i + 1),
            Observable::Monomial { index, degree } => write!(f, "pow(x{},{})", index + 1, degree),
            Observable::Sine { index, scale } => write!(f, "sin({})", arg(index, scale)),
            Observable::Cosine { index, scale } => write!(f, "cos({})", arg(index, scale)),
        }
    }
}

/// `ψ: R^n -> R^p` with `C = [I_n 0]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Lifting {
    observables: Vec<Observable>,
    state_dim: usize,
}

impl TryFrom<Vec<String>> for Lifting {
    type Error = LiftingError;

    fn try_from(descriptors: Vec<String>) -> Result<Self, Self::Error> {
        Lifting::parse(&descriptors)
    }
}

impl From<Lifting> for Vec<String> {
    fn from(l: Lifting) -> Self {
        l.descriptors()
    }
}

impl Lifting {
    /// The first `n` observables must be `x1..xn` in order, where `n` is the
    /// length of that leading coordinate run.
    pub fn new(observables: Vec<Observable>) -> Result<Self, LiftingError> {
        let n = observables
            .iter()
            .enumerate()
            .take_while(|(k, o)| **o == Observable::Coordinate(*k))
            .count();
        if n == 0 {
            return Err(LiftingError::MissingCoordinate { index: 0, expected: 1 });
        }
        for o in &observables[n..] {
            if let Observable::Coordinate(_) = o {
                return Err(LiftingError::MissingCoordinate { index: n, expected: n + 1 });
            }
            if o.index() >= n {
                return Err(LiftingError::IndexOutOfRange { index: o.index() + 1, n });
            }
        }
        Ok(Self { observables, state_dim: n })
    }

    pub fn parse<S: AsRef<str>>(descriptors: &[S]) -> Result<Self, LiftingError> {
        let obs = descriptors
            .iter()
            .map(|d| d.as_ref().parse())
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(obs)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            observables: (0..n).map(Observable::Coordinate).collect(),
            state_dim: n,
        }
    }

    pub fn descriptors(&self) -> Vec<String> {
        self.observables.iter().map(ToString::to_string).collect()
    }

    pub fn observables(&self) -> &[Observable] {
        &self.observables
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn lifted_dim(&self) -> usize {
        self.observables.len()
    }

    /// `C = [I_n 0]`.
    pub fn left_inverse(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.state_dim, self.lifted_dim(), |i, j| {
            if i == j {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn lift(&self, x: &DVector<f64>) -> Result<DVector<f64>, LiftingError> {
        if x.len() != self.state_dim {
            return Err(LiftingError::DimensionMismatch {
                expected: self.state_dim,
                found: x.len(),
            });
        }
        Ok(self.lift_unchecked(x))
    }

    pub(crate) fn lift_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.lifted_dim(), self.observables.iter().map(|o| o.eval(x)))
    }

    /// `{z | C z ∈ X}`.
    pub fn implicit_set(&self, x_set: &HPolytope) -> Result<HPolytope, LiftingError> {
        if x_set.dim() != self.state_dim {
            return Err(LiftingError::DimensionMismatch {
                expected: self.state_dim,
                found: x_set.dim(),
            });
        }
        Ok(x_set.affine_preimage(&self.left_inverse(), &DVector::zeros(self.state_dim))?)
    }

    /// Infinity-norm Lipschitz constant of ψ over `domain`. Every observable
    /// depends on one coordinate, so its gradient 1-norm is a single slope.
    pub fn lipschitz_constant(&self, domain: &BoxSet) -> Result<f64, LiftingError> {
        if domain.dim() != self.state_dim {
            return Err(LiftingError::DimensionMismatch {
                expected: self.state_dim,
                found: domain.dim(),
            });
        }
        let (lo, hi) = (domain.lower(), domain.upper());
        Ok(self
            .observables
            .iter()
            .map(|o| o.slope_bound(lo[o.index()], hi[o.index()]))
            .fold(0.0, f64::max))
    }
}
