//! H-representation polytopes `{x | H x <= h}`, axis-aligned boxes and
//! flat unions of polytopes.
//!
//! All geometry uses the infinity norm: a [`BoxSet`] is an infinity-norm
//! ball with per-coordinate radii, and erosion by a box reduces to a support
//! function evaluation per row. Empty polytopes are ordinary values; only the
//! operations that need a nonempty or bounded argument report errors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{self, LinearProgram, LpError, LpStatus};

/// Default membership tolerance.
pub const MEMBERSHIP_TOL: f64 = 1e-8;
/// A row is redundant when its LP maximum exceeds its offset by at most this.
pub const REDUNDANCY_TOL: f64 = 1e-9;

const ZERO_COEFF: f64 = 1e-12;
/// Below this inscribed radius a polytope counts as flat.
const INTERIOR_RADIUS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolytopeError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("polytope is empty")]
    EmptyPolytope,
    #[error("polytope is unbounded")]
    UnboundedPolytope,
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
    #[error(transparent)]
    Lp(#[from] LpError),
}

fn check_dim(expected: usize, found: usize) -> Result<(), PolytopeError> {
    if expected == found {
        Ok(())
    } else {
        Err(PolytopeError::DimensionMismatch { expected, found })
    }
}

/// `{x | normals · x <= offsets}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolytopeRepr", into = "PolytopeRepr")]
pub struct HPolytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct PolytopeRepr {
    dim: usize,
    #[serde(rename = "H")]
    normals: Vec<Vec<f64>>,
    #[serde(rename = "h")]
    offsets: Vec<f64>,
}

impl From<HPolytope> for PolytopeRepr {
    fn from(p: HPolytope) -> Self {
        PolytopeRepr {
            dim: p.dim(),
            normals: (0..p.num_rows())
                .map(|i| p.normals.row(i).iter().copied().collect())
                .collect(),
            offsets: p.offsets.iter().copied().collect(),
        }
    }
}

impl TryFrom<PolytopeRepr> for HPolytope {
    type Error = PolytopeError;

    fn try_from(r: PolytopeRepr) -> Result<Self, Self::Error> {
        check_dim(r.normals.len(), r.offsets.len())?;
        for row in &r.normals {
            check_dim(r.dim, row.len())?;
        }
        let normals = DMatrix::from_fn(r.normals.len(), r.dim, |i, j| r.normals[i][j]);
        HPolytope::new(normals, DVector::from_vec(r.offsets))
    }
}

impl HPolytope {
    /// Builds a polytope, dropping trivially satisfied all-zero rows. An
    /// all-zero row with a negative offset turns the result into the
    /// canonical empty polytope.
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self, PolytopeError> {
        check_dim(normals.nrows(), offsets.len())?;
        let d = normals.ncols();
        if d == 0 {
            return Err(PolytopeError::DimensionMismatch { expected: 1, found: 0 });
        }
        let mut keep = Vec::with_capacity(normals.nrows());
        for i in 0..normals.nrows() {
            let zero = normals.row(i).iter().all(|v| v.abs() <= ZERO_COEFF);
            if zero {
                if offsets[i] < -MEMBERSHIP_TOL {
                    return Ok(Self::empty(d));
                }
            } else {
                keep.push(i);
            }
        }
        if keep.len() == normals.nrows() {
            return Ok(Self { normals, offsets });
        }
        Ok(Self::from_row_indices(&normals, &offsets, &keep))
    }

    fn from_row_indices(normals: &DMatrix<f64>, offsets: &DVector<f64>, rows: &[usize]) -> Self {
        Self {
            normals: normals.select_rows(rows.iter()),
            offsets: DVector::from_iterator(rows.len(), rows.iter().map(|&i| offsets[i])),
        }
    }

    /// The whole space `R^d`.
    pub fn universe(d: usize) -> Self {
        Self {
            normals: DMatrix::zeros(0, d),
            offsets: DVector::zeros(0),
        }
    }

    /// Canonical empty set: `x_1 <= -1` and `-x_1 <= -1`.
    pub fn empty(d: usize) -> Self {
        let mut normals = DMatrix::zeros(2, d);
        normals[(0, 0)] = 1.0;
        normals[(1, 0)] = -1.0;
        Self {
            normals,
            offsets: DVector::from_vec(vec![-1.0, -1.0]),
        }
    }

    /// `{x | lo <= x <= hi}` as `2d` rows: upper bounds first, then lower.
    pub fn from_interval_box(lo: &[f64], hi: &[f64]) -> Result<Self, PolytopeError> {
        check_dim(lo.len(), hi.len())?;
        let d = lo.len();
        if d == 0 {
            return Err(PolytopeError::DimensionMismatch { expected: 1, found: 0 });
        }
        if lo.iter().zip(hi).any(|(l, h)| l > h || !l.is_finite() || !h.is_finite()) {
            return Err(PolytopeError::InvalidBounds(format!("{lo:?} .. {hi:?}")));
        }
        let mut normals = DMatrix::zeros(2 * d, d);
        let mut offsets = DVector::zeros(2 * d);
        for j in 0..d {
            normals[(j, j)] = 1.0;
            offsets[j] = hi[j];
            normals[(d + j, j)] = -1.0;
            offsets[d + j] = -lo[j];
        }
        Ok(Self { normals, offsets })
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    /// All rows satisfied within `tol`.
    pub fn contains_point(&self, x: &DVector<f64>, tol: f64) -> Result<bool, PolytopeError> {
        check_dim(self.dim(), x.len())?;
        Ok(self.max_violation(x) <= tol)
    }

    /// `max_i (H_i x - h_i)`, or `-inf` without rows.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for i in 0..self.num_rows() {
            let mut lhs = 0.0;
            for j in 0..self.dim() {
                lhs += self.normals[(i, j)] * x[j];
            }
            worst = worst.max(lhs - self.offsets[i]);
        }
        worst
    }

    /// Row concatenation; membership is the conjunction.
    pub fn intersect(&self, other: &HPolytope) -> Result<HPolytope, PolytopeError> {
        check_dim(self.dim(), other.dim())?;
        let d = self.dim();
        let k = self.num_rows() + other.num_rows();
        let mut normals = DMatrix::zeros(k, d);
        normals.rows_mut(0, self.num_rows()).copy_from(&self.normals);
        normals
            .rows_mut(self.num_rows(), other.num_rows())
            .copy_from(&other.normals);
        let offsets = DVector::from_iterator(
            k,
            self.offsets.iter().chain(other.offsets.iter()).copied(),
        );
        Ok(HPolytope { normals, offsets })
    }

    /// `self x other` in `R^(d_self + d_other)`.
    pub fn cartesian_product(&self, other: &HPolytope) -> HPolytope {
        let (d1, d2) = (self.dim(), other.dim());
        let (k1, k2) = (self.num_rows(), other.num_rows());
        let mut normals = DMatrix::zeros(k1 + k2, d1 + d2);
        normals.view_mut((0, 0), (k1, d1)).copy_from(&self.normals);
        normals.view_mut((k1, d1), (k2, d2)).copy_from(&other.normals);
        let offsets = DVector::from_iterator(
            k1 + k2,
            self.offsets.iter().chain(other.offsets.iter()).copied(),
        );
        HPolytope { normals, offsets }
    }

    /// `{y | M y + v ∈ self}`.
    pub fn affine_preimage(
        &self,
        map: &DMatrix<f64>,
        shift: &DVector<f64>,
    ) -> Result<HPolytope, PolytopeError> {
        check_dim(self.dim(), map.nrows())?;
        check_dim(self.dim(), shift.len())?;
        let normals = &self.normals * map;
        let offsets = &self.offsets - &self.normals * shift;
        HPolytope::new(normals, offsets)
    }

    /// Pontryagin difference `self ⊖ w`: every row offset shrinks by the
    /// support of `w` in the row's direction.
    pub fn erode(&self, w: &BoxSet) -> Result<HPolytope, PolytopeError> {
        check_dim(self.dim(), w.dim())?;
        let mut offsets = self.offsets.clone();
        for i in 0..self.num_rows() {
            let row: DVector<f64> = self.normals.row(i).transpose();
            offsets[i] -= w.support(&row)?;
        }
        Ok(HPolytope {
            normals: self.normals.clone(),
            offsets,
        })
    }

    fn lp_over(&self, objective: DVector<f64>, maximize: bool) -> LinearProgram {
        let lp = if maximize {
            LinearProgram::maximize(objective)
        } else {
            LinearProgram::minimize(objective)
        };
        lp.with_inequalities(&self.normals, &self.offsets)
    }

    /// True iff no point satisfies every row within the LP feasibility
    /// tolerance.
    pub fn is_empty(&self) -> Result<bool, PolytopeError> {
        if self.num_rows() == 0 {
            return Ok(false);
        }
        let sol = lp::solve(&self.lp_over(DVector::zeros(self.dim()), false))?;
        Ok(sol.status == LpStatus::Infeasible)
    }

    /// `max { a·x | x ∈ self }`.
    pub fn support(&self, direction: &DVector<f64>) -> Result<Support, PolytopeError> {
        check_dim(self.dim(), direction.len())?;
        let sol = lp::solve(&self.lp_over(direction.clone(), true))?;
        Ok(match sol.status {
            LpStatus::Optimal => Support::Finite(sol.objective_value),
            LpStatus::Unbounded => Support::Unbounded,
            LpStatus::Infeasible => Support::Empty,
        })
    }

    /// Center and radius of the largest inscribed Euclidean ball.
    pub fn chebyshev_center(&self) -> Result<(DVector<f64>, f64), PolytopeError> {
        let d = self.dim();
        let k = self.num_rows();
        let mut normals = DMatrix::zeros(k + 1, d + 1);
        normals.view_mut((0, 0), (k, d)).copy_from(&self.normals);
        for i in 0..k {
            normals[(i, d)] = self.normals.row(i).norm();
        }
        normals[(k, d)] = -1.0;
        let offsets = DVector::from_iterator(k + 1, self.offsets.iter().copied().chain([0.0]));
        let mut objective = DVector::zeros(d + 1);
        objective[d] = 1.0;
        let sol = lp::solve(&LinearProgram::maximize(objective).with_inequalities(&normals, &offsets))?;
        match sol.status {
            LpStatus::Optimal => {
                let p = sol.point.expect("optimal LP has a point");
                Ok((p.rows(0, d).into_owned(), p[d].max(0.0)))
            }
            LpStatus::Infeasible => Err(PolytopeError::EmptyPolytope),
            LpStatus::Unbounded => Err(PolytopeError::UnboundedPolytope),
        }
    }

    /// Tight axis-aligned bounding box from `2d` LPs.
    pub fn bounding_box(&self) -> Result<BoxSet, PolytopeError> {
        let d = self.dim();
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        for j in 0..d {
            let mut e = DVector::zeros(d);
            e[j] = 1.0;
            hi[j] = self.support(&e)?.finite()?;
            e[j] = -1.0;
            lo[j] = -self.support(&e)?.finite()?;
        }
        BoxSet::from_bounds(&lo, &hi)
    }

    /// Drops every row implied by the remaining ones. Rows are first scaled
    /// to unit Euclidean norm and exact duplicates collapsed.
    pub fn remove_redundant(&self) -> Result<HPolytope, PolytopeError> {
        let d = self.dim();
        if self.num_rows() == 0 {
            return Ok(self.clone());
        }
        let normalized = self.normalized_unique();
        let interior = match normalized.chebyshev_center() {
            Ok((c, r)) if r > INTERIOR_RADIUS => Some(c),
            Ok(_) | Err(PolytopeError::UnboundedPolytope) => None,
            Err(PolytopeError::EmptyPolytope) => return Ok(HPolytope::empty(d)),
            Err(e) => return Err(e),
        };
        let rows = match interior {
            Some(c) => normalized.facets_by_ray_shooting(&c)?,
            None => normalized.facets_exhaustive()?,
        };
        Ok(HPolytope::from_row_indices(&normalized.normals, &normalized.offsets, &rows))
    }

    /// `max a_i·x` over `rows ∪ {i}`, with row `i` relaxed by one so the LP
    /// stays bounded. `None` when row `i` is implied by `rows`.
    fn violating_point(&self, i: usize, rows: &[usize]) -> Result<Option<DVector<f64>>, PolytopeError> {
        let mut all = rows.to_vec();
        all.push(i);
        let mut sub = HPolytope::from_row_indices(&self.normals, &self.offsets, &all);
        let last = sub.num_rows() - 1;
        sub.offsets[last] += 1.0;
        let sol = lp::solve(&sub.lp_over(self.normals.row(i).transpose(), true))?;
        Ok(match sol.status {
            LpStatus::Optimal if sol.objective_value > self.offsets[i] + REDUNDANCY_TOL => sol.point,
            _ => None,
        })
    }

    /// Clarkson's method: LPs only ever see rows already known to be facets,
    /// and a violating point is resolved by shooting a ray from the interior
    /// point `c`; the first row it crosses is a facet.
    fn facets_by_ray_shooting(&self, c: &DVector<f64>) -> Result<Vec<usize>, PolytopeError> {
        let k = self.num_rows();
        let slack: Vec<f64> = (0..k).map(|j| self.offsets[j] - self.normals.row(j).dot(&c.transpose())).collect();
        let mut facet = vec![false; k];
        let mut facets: Vec<usize> = Vec::new();
        for i in 0..k {
            while !facet[i] {
                let Some(x) = self.violating_point(i, &facets)? else {
                    break;
                };
                let dir = x - c;
                let mut hit = i;
                let mut best = f64::INFINITY;
                for j in (0..k).filter(|&j| !facet[j]) {
                    let rate = self.normals.row(j).dot(&dir.transpose());
                    if rate > ZERO_COEFF {
                        let t = slack[j] / rate;
                        if t < best || (t == best && j == i) {
                            best = t;
                            hit = j;
                        }
                    }
                }
                facet[hit] = true;
                facets.push(hit);
            }
        }
        facets.sort_unstable();
        Ok(facets)
    }

    /// One LP per row against all surviving rows. Used when there is no
    /// interior point to shoot rays from.
    fn facets_exhaustive(&self) -> Result<Vec<usize>, PolytopeError> {
        let k = self.num_rows();
        let mut keep = vec![true; k];
        for i in 0..k {
            let others: Vec<usize> = (0..k).filter(|&r| r != i && keep[r]).collect();
            if self.violating_point(i, &others)?.is_none() {
                keep[i] = false;
            }
        }
        Ok((0..k).filter(|&r| keep[r]).collect())
    }

    /// Unit-norm rows with parallel duplicates merged (tightest offset kept).
    fn normalized_unique(&self) -> HPolytope {
        let d = self.dim();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(self.num_rows());
        for i in 0..self.num_rows() {
            let norm = self.normals.row(i).norm();
            let a: Vec<f64> = self.normals.row(i).iter().map(|v| v / norm).collect();
            let b = self.offsets[i] / norm;
            match rows
                .iter_mut()
                .find(|(r, _)| r.iter().zip(&a).all(|(x, y)| (x - y).abs() <= 1e-12))
            {
                Some(existing) => existing.1 = existing.1.min(b),
                None => rows.push((a, b)),
            }
        }
        HPolytope {
            normals: DMatrix::from_fn(rows.len(), d, |i, j| rows[i].0[j]),
            offsets: DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1)),
        }
    }

    /// Fourier-Motzkin elimination of a single coordinate.
    fn eliminate(&self, col: usize) -> HPolytope {
        let d = self.dim();
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut zero = Vec::new();
        for i in 0..self.num_rows() {
            let a = self.normals[(i, col)];
            if a > ZERO_COEFF {
                pos.push(i);
            } else if a < -ZERO_COEFF {
                neg.push(i);
            } else {
                zero.push(i);
            }
        }
        let drop_col = |i: usize, scale: f64| -> Vec<f64> {
            (0..d)
                .filter(|&j| j != col)
                .map(|j| self.normals[(i, j)] * scale)
                .collect()
        };
        let mut rows: Vec<(Vec<f64>, f64)> = zero
            .iter()
            .map(|&i| (drop_col(i, 1.0), self.offsets[i]))
            .collect();
        for &p in &pos {
            let sp = 1.0 / self.normals[(p, col)];
            let ap = drop_col(p, sp);
            for &n in &neg {
                let sn = -1.0 / self.normals[(n, col)];
                let an = drop_col(n, sn);
                let a: Vec<f64> = ap.iter().zip(&an).map(|(x, y)| x + y).collect();
                let b = self.offsets[p] * sp + self.offsets[n] * sn;
                rows.push((a, b));
            }
        }
        if d == 1 {
            // Eliminating the only coordinate leaves a feasibility question.
            let infeasible = rows.iter().any(|(_, b)| *b < -MEMBERSHIP_TOL);
            return if infeasible {
                HPolytope::empty(1)
            } else {
                HPolytope::universe(1)
            };
        }
        let mut out_rows = Vec::with_capacity(rows.len());
        for (a, b) in rows {
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= ZERO_COEFF {
                if b < -MEMBERSHIP_TOL {
                    return HPolytope::empty(d - 1);
                }
                continue;
            }
            out_rows.push((a.iter().map(|v| v / norm).collect::<Vec<_>>(), b / norm));
        }
        HPolytope {
            normals: DMatrix::from_fn(out_rows.len(), d - 1, |i, j| out_rows[i].0[j]),
            offsets: DVector::from_iterator(out_rows.len(), out_rows.iter().map(|r| r.1)),
        }
    }

    /// Orthogonal projection onto the coordinates in `keep` (in that order),
    /// by Fourier-Motzkin elimination of the others with redundancy removal
    /// after every step.
    pub fn project(&self, keep: &[usize]) -> Result<HPolytope, PolytopeError> {
        let d = self.dim();
        if keep.is_empty() {
            return Err(PolytopeError::DimensionMismatch { expected: 1, found: 0 });
        }
        if let Some(&bad) = keep.iter().find(|&&k| k >= d) {
            return Err(PolytopeError::DimensionMismatch { expected: d, found: bad + 1 });
        }
        let mut current = self.remove_redundant()?;
        // Track which original coordinate sits in each column.
        let mut columns: Vec<usize> = (0..d).collect();
        for col in (0..d).rev() {
            if keep.contains(&col) {
                continue;
            }
            let pos = columns.iter().position(|&c| c == col).expect("column tracked");
            if current.dim() == 1 {
                break;
            }
            current = current.eliminate(pos);
            columns.remove(pos);
            current = current.remove_redundant()?;
        }
        let order: Vec<usize> = keep
            .iter()
            .map(|k| columns.iter().position(|c| c == k).expect("kept column"))
            .collect();
        let normals = DMatrix::from_fn(current.num_rows(), keep.len(), |i, j| {
            current.normals[(i, order[j])]
        });
        Ok(HPolytope {
            normals,
            offsets: current.offsets,
        })
    }

    /// Halves through the Chebyshev center along the axis of greatest
    /// bounding-box span (lowest index on ties).
    pub fn split_through_center(&self) -> Result<(HPolytope, HPolytope), PolytopeError> {
        if self.is_empty()? {
            return Err(PolytopeError::EmptyPolytope);
        }
        let bbox = self.bounding_box()?;
        let mut axis = 0;
        for j in 1..self.dim() {
            if bbox.radii[j] > bbox.radii[axis] {
                axis = j;
            }
        }
        let (center, _) = self.chebyshev_center()?;
        let d = self.dim();
        let mut cut = DMatrix::zeros(1, d);
        cut[(0, axis)] = 1.0;
        let lower = self.intersect(&HPolytope {
            normals: cut.clone(),
            offsets: DVector::from_element(1, center[axis]),
        })?;
        let upper = self.intersect(&HPolytope {
            normals: -cut,
            offsets: DVector::from_element(1, -center[axis]),
        })?;
        Ok((lower.remove_redundant()?, upper.remove_redundant()?))
    }

    /// Vertices of a bounded planar polytope in counter-clockwise order.
    pub fn vertex_loop_2d(&self) -> Result<Vec<[f64; 2]>, PolytopeError> {
        check_dim(2, self.dim())?;
        let p = self.remove_redundant()?;
        if p.is_empty()? {
            return Ok(Vec::new());
        }
        let k = p.num_rows();
        let mut verts: Vec<[f64; 2]> = Vec::new();
        for i in 0..k {
            for j in (i + 1)..k {
                let (a, b) = (p.normals[(i, 0)], p.normals[(i, 1)]);
                let (c, e) = (p.normals[(j, 0)], p.normals[(j, 1)]);
                let det = a * e - b * c;
                if det.abs() < 1e-12 {
                    continue;
                }
                let x = (p.offsets[i] * e - b * p.offsets[j]) / det;
                let y = (a * p.offsets[j] - c * p.offsets[i]) / det;
                let v = DVector::from_vec(vec![x, y]);
                if p.max_violation(&v) <= 1e-9
                    && !verts
                        .iter()
                        .any(|w| (w[0] - x).abs() <= 1e-9 && (w[1] - y).abs() <= 1e-9)
                {
                    verts.push([x, y]);
                }
            }
        }
        if verts.is_empty() {
            return Err(PolytopeError::UnboundedPolytope);
        }
        let cx = verts.iter().map(|v| v[0]).sum::<f64>() / verts.len() as f64;
        let cy = verts.iter().map(|v| v[1]).sum::<f64>() / verts.len() as f64;
        verts.sort_by(|u, v| {
            let au = (u[1] - cy).atan2(u[0] - cx);
            let av = (v[1] - cy).atan2(v[0] - cx);
            au.total_cmp(&av)
        });
        Ok(verts)
    }
}

/// Result of a support-function query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Support {
    Finite(f64),
    Unbounded,
    Empty,
}

impl Support {
    pub fn finite(self) -> Result<f64, PolytopeError> {
        match self {
            Support::Finite(v) => Ok(v),
            Support::Unbounded => Err(PolytopeError::UnboundedPolytope),
            Support::Empty => Err(PolytopeError::EmptyPolytope),
        }
    }
}

/// Axis-aligned box `center ⊕ ⨉[-radii_j, radii_j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr", into = "BoxRepr")]
pub struct BoxSet {
    pub center: DVector<f64>,
    pub radii: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    center: Vec<f64>,
    radii: Vec<f64>,
}

impl From<BoxSet> for BoxRepr {
    fn from(b: BoxSet) -> Self {
        BoxRepr {
            center: b.center.iter().copied().collect(),
            radii: b.radii.iter().copied().collect(),
        }
    }
}

impl TryFrom<BoxRepr> for BoxSet {
    type Error = PolytopeError;

    fn try_from(r: BoxRepr) -> Result<Self, Self::Error> {
        BoxSet::new(DVector::from_vec(r.center), DVector::from_vec(r.radii))
    }
}

impl BoxSet {
    pub fn new(center: DVector<f64>, radii: DVector<f64>) -> Result<Self, PolytopeError> {
        check_dim(center.len(), radii.len())?;
        if radii.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
            return Err(PolytopeError::InvalidBounds("radii must be finite and >= 0".into()));
        }
        Ok(Self { center, radii })
    }

    pub fn from_bounds(lo: &[f64], hi: &[f64]) -> Result<Self, PolytopeError> {
        check_dim(lo.len(), hi.len())?;
        if lo.iter().zip(hi).any(|(l, h)| l > h) {
            return Err(PolytopeError::InvalidBounds(format!("{lo:?} .. {hi:?}")));
        }
        Self::new(
            DVector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h))),
            DVector::from_iterator(lo.len(), lo.iter().zip(hi).map(|(l, h)| 0.5 * (h - l))),
        )
    }

    /// Box with zero center.
    pub fn centered(radii: DVector<f64>) -> Result<Self, PolytopeError> {
        Self::new(DVector::zeros(radii.len()), radii)
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn lower(&self) -> DVector<f64> {
        &self.center - &self.radii
    }

    pub fn upper(&self) -> DVector<f64> {
        &self.center + &self.radii
    }

    /// `a·center + Σ |a_j| radii_j`.
    pub fn support(&self, direction: &DVector<f64>) -> Result<f64, PolytopeError> {
        check_dim(self.dim(), direction.len())?;
        Ok(direction.dot(&self.center)
            + direction
                .iter()
                .zip(self.radii.iter())
                .map(|(a, r)| a.abs() * r)
                .sum::<f64>())
    }

    pub fn volume(&self) -> f64 {
        self.radii.iter().map(|r| 2.0 * r).product()
    }

    pub fn to_polytope(&self) -> HPolytope {
        let lo: Vec<f64> = self.lower().iter().copied().collect();
        let hi: Vec<f64> = self.upper().iter().copied().collect();
        HPolytope::from_interval_box(&lo, &hi).expect("box bounds are ordered")
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        x.len() == self.dim()
            && (0..self.dim()).all(|j| (x[j] - self.center[j]).abs() <= self.radii[j] + tol)
    }

    /// The `2^d` corners, in binary counting order of the sign pattern.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let d = self.dim();
        (0..(1usize << d))
            .map(|mask| {
                DVector::from_fn(d, |j, _| {
                    let s = if mask >> j & 1 == 1 { 1.0 } else { -1.0 };
                    self.center[j] + s * self.radii[j]
                })
            })
            .collect()
    }

    /// Uniform sample.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |j, _| {
            self.center[j] + self.radii[j] * rng.gen_range(-1.0..=1.0)
        })
    }

    pub fn radii_l1(&self) -> f64 {
        self.radii.iter().sum()
    }
}

/// Flat list of polytopes sharing one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UnionRepr", into = "UnionRepr")]
pub struct PolyUnion {
    dim: usize,
    pieces: Vec<HPolytope>,
}

#[derive(Serialize, Deserialize)]
struct UnionRepr {
    pieces: Vec<HPolytope>,
}

impl From<PolyUnion> for UnionRepr {
    fn from(u: PolyUnion) -> Self {
        UnionRepr { pieces: u.pieces }
    }
}

impl TryFrom<UnionRepr> for PolyUnion {
    type Error = PolytopeError;

    fn try_from(r: UnionRepr) -> Result<Self, Self::Error> {
        let dim = r.pieces.first().map_or(0, HPolytope::dim);
        PolyUnion::new(dim, r.pieces)
    }
}

impl PolyUnion {
    pub fn new(dim: usize, pieces: Vec<HPolytope>) -> Result<Self, PolytopeError> {
        for p in &pieces {
            check_dim(dim, p.dim())?;
        }
        Ok(Self { dim, pieces })
    }

    pub fn empty(dim: usize) -> Self {
        Self { dim, pieces: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pieces(&self) -> &[HPolytope] {
        &self.pieces
    }

    pub fn push(&mut self, piece: HPolytope) -> Result<(), PolytopeError> {
        check_dim(self.dim, piece.dim())?;
        self.pieces.push(piece);
        Ok(())
    }

    pub fn contains_point(&self, x: &DVector<f64>, tol: f64) -> bool {
        self.pieces.iter().any(|p| p.max_violation(x) <= tol)
    }

    /// Monte-Carlo volume: hit fraction of `n` uniform samples from
    /// `sampling_box`, times the box volume.
    pub fn volume_estimate(&self, sampling_box: &BoxSet, n: usize, seed: u64) -> f64 {
        if self.pieces.is_empty() || n == 0 {
            return 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hits = (0..n)
            .filter(|_| self.contains_point(&sampling_box.sample(&mut rng), MEMBERSHIP_TOL))
            .count();
        hits as f64 / n as f64 * sampling_box.volume()
    }
}

/// Box aligned with the principal axes of a point cloud.
#[derive(Debug, Clone)]
pub struct RotatedBox {
    pub polytope: HPolytope,
    /// Unit axes as columns, by decreasing variance.
    pub axes: DMatrix<f64>,
    /// Covariance was rank deficient; `polytope` is the axis-aligned box
    /// inflated by `1e-6`.
    pub degenerate: bool,
}

/// Principal-axis bounding box of `points`.
pub fn rotated_bounding_box(points: &[DVector<f64>]) -> Result<RotatedBox, PolytopeError> {
    if points.len() < 2 {
        return Err(PolytopeError::TooFewPoints { needed: 2, got: points.len() });
    }
    let d = points[0].len();
    for p in points {
        check_dim(d, p.len())?;
    }
    let n = points.len() as f64;
    let mean = points.iter().fold(DVector::zeros(d), |acc, p| acc + p) / n;
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let c = p - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let rank_deficient = order
        .iter()
        .any(|&k| eig.eigenvalues[k] <= 1e-12 * top.max(f64::MIN_POSITIVE));
    if rank_deficient {
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for p in points {
            for j in 0..d {
                lo[j] = lo[j].min(p[j] - 1e-6);
                hi[j] = hi[j].max(p[j] + 1e-6);
            }
        }
        return Ok(RotatedBox {
            polytope: HPolytope::from_interval_box(&lo, &hi)?,
            axes: DMatrix::identity(d, d),
            degenerate: true,
        });
    }
    let mut axes = DMatrix::zeros(d, d);
    for (col, &k) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v = -v;
            }
        }
        axes.set_column(col, &v);
    }
    let mut normals = DMatrix::zeros(2 * d, d);
    let mut offsets = DVector::zeros(2 * d);
    for j in 0..d {
        let axis = axes.column(j);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            let s = axis.dot(p);
            lo = lo.min(s);
            hi = hi.max(s);
        }
        normals.row_mut(j).copy_from(&axis.transpose());
        offsets[j] = hi;
        normals.row_mut(d + j).copy_from(&(-axis.transpose()));
        offsets[d + j] = -lo;
    }
    Ok(RotatedBox {
        polytope: HPolytope::new(normals, offsets)?,
        axes,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_vec(xs.to_vec())
    }

    fn unit_square() -> HPolytope {
        HPolytope::from_interval_box(&[0.0, 0.0], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn interval_box_rows() {
        let p = HPolytope::from_interval_box(&[-1.0], &[1.0]).unwrap();
        assert_eq!(p.num_rows(), 2);
        assert_eq!(p.normals()[(0, 0)], 1.0);
        assert_eq!(p.offsets()[0], 1.0);
        assert_eq!(p.normals()[(1, 0)], -1.0);
        assert_eq!(p.offsets()[1], 1.0);
        assert!(HPolytope::from_interval_box(&[1.0], &[0.0]).is_err());
        assert!(HPolytope::from_interval_box(&[0.0, 0.0], &[1.0]).is_err());
    }

    #[test]
    fn degenerate_point_box() {
        let p = HPolytope::from_interval_box(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!(p.contains_point(&v(&[0.0, 0.0]), 0.0).unwrap());
        assert!(!p.contains_point(&v(&[1e-6, 0.0]), 1e-8).unwrap());
        assert!(!p.is_empty().unwrap());
    }

    #[test]
    fn pendulum_domain() {
        let p = HPolytope::from_interval_box(&[0.0, -6.0], &[1.5 * std::f64::consts::PI, 4.0])
            .unwrap();
        assert!(p.contains_point(&v(&[std::f64::consts::PI, 0.0]), MEMBERSHIP_TOL).unwrap());
        assert!(!p.contains_point(&v(&[5.0, 0.0]), MEMBERSHIP_TOL).unwrap());
    }

    #[test]
    fn box_support() {
        let b = BoxSet::new(v(&[0.0, 0.0]), v(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(b.support(&v(&[1.0, -2.0])).unwrap(), 3.0);
        let point = BoxSet::new(v(&[2.0, -1.0]), v(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(point.support(&v(&[3.0, 1.0])).unwrap(), 5.0);
        let b = BoxSet::new(v(&[1.0, 0.0]), v(&[0.5, 0.5])).unwrap();
        let by_vertices = b
            .vertices()
            .iter()
            .map(|w| w.dot(&v(&[1.0, 1.0])))
            .fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(b.support(&v(&[1.0, 1.0])).unwrap(), 2.0);
        assert_relative_eq!(by_vertices, 2.0);
        assert!(b.support(&v(&[1.0])).is_err());
    }

    #[test]
    fn erosion_examples() {
        let z = HPolytope::from_interval_box(&[-1.0], &[1.0]).unwrap();
        let w = BoxSet::new(v(&[0.0]), v(&[0.2])).unwrap();
        let e = z.erode(&w).unwrap();
        assert_relative_eq!(e.offsets()[0], 0.8);
        assert_relative_eq!(e.offsets()[1], 0.8);
        let zero = BoxSet::new(v(&[0.0]), v(&[0.0])).unwrap();
        assert_eq!(z.erode(&zero).unwrap(), z);
        let big = BoxSet::new(v(&[0.0, 0.0]), v(&[0.6, 0.6])).unwrap();
        assert!(unit_square().erode(&big).unwrap().is_empty().unwrap());
    }

    #[test]
    fn intersect_and_product() {
        let a = HPolytope::from_interval_box(&[-1.0], &[1.0]).unwrap();
        let b = HPolytope::from_interval_box(&[0.0], &[2.0]).unwrap();
        let c = a.intersect(&b).unwrap().remove_redundant().unwrap();
        let bb = c.bounding_box().unwrap();
        assert_relative_eq!(bb.lower()[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(bb.upper()[0], 1.0, epsilon = 1e-12);
        let sq = a.intersect(&a).unwrap().remove_redundant().unwrap();
        assert_eq!(sq.num_rows(), 2);

        let unit = HPolytope::from_interval_box(&[0.0], &[1.0]).unwrap();
        let prod = unit.cartesian_product(&unit);
        assert_eq!(prod.dim(), 2);
        assert!(prod.contains_point(&v(&[0.5, 0.9]), 0.0).unwrap());
        assert!(!prod.contains_point(&v(&[0.5, 1.1]), 1e-8).unwrap());
        assert!(a.intersect(&prod).is_err());
    }

    #[test]
    fn affine_preimage_examples() {
        let p = HPolytope::from_interval_box(&[-1.0], &[1.0]).unwrap();
        let id = p
            .affine_preimage(&DMatrix::identity(1, 1), &DVector::zeros(1))
            .unwrap();
        assert_eq!(id, p);
        let scaled = p
            .affine_preimage(&(DMatrix::identity(1, 1) * 2.0), &DVector::zeros(1))
            .unwrap();
        let bb = scaled.bounding_box().unwrap();
        assert_relative_eq!(bb.upper()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(bb.lower()[0], -0.5, epsilon = 1e-12);
        // Slab in R^3 from a box in R^2 through C = [I 0].
        let target = HPolytope::from_interval_box(&[-0.1, -0.1], &[0.1, 0.1]).unwrap();
        let c = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let slab = target.affine_preimage(&c, &DVector::zeros(2)).unwrap();
        assert_eq!(slab.dim(), 3);
        assert!(slab.contains_point(&v(&[0.1, -0.1, 1e6]), 1e-12).unwrap());
        assert!(!slab.contains_point(&v(&[0.2, 0.0, 0.0]), 1e-8).unwrap());
        assert!(p.affine_preimage(&c, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn emptiness() {
        assert!(!HPolytope::from_interval_box(&[0.0], &[1.0]).unwrap().is_empty().unwrap());
        let bad = HPolytope::new(
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            v(&[-1.0, -1.0]),
        )
        .unwrap();
        assert!(bad.is_empty().unwrap());
        assert!(HPolytope::empty(3).is_empty().unwrap());
        let zero_row = HPolytope::new(DMatrix::zeros(1, 2), v(&[-0.5])).unwrap();
        assert!(zero_row.is_empty().unwrap());
        assert!(!HPolytope::universe(2).is_empty().unwrap());
    }

    #[test]
    fn chebyshev_examples() {
        let (c, r) = unit_square().chebyshev_center().unwrap();
        assert_relative_eq!(r, 0.5, epsilon = 1e-12);
        assert_relative_eq!(c[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(c[1], 0.5, epsilon = 1e-12);
        let rect = HPolytope::from_interval_box(&[0.0, 0.0], &[2.0, 1.0]).unwrap();
        let (c, r) = rect.chebyshev_center().unwrap();
        assert_relative_eq!(r, 0.5, epsilon = 1e-12);
        assert_relative_eq!(c[1], 0.5, epsilon = 1e-12);
        assert!(c[0] >= 0.5 - 1e-12 && c[0] <= 1.5 + 1e-12);
        assert_eq!(
            HPolytope::empty(2).chebyshev_center(),
            Err(PolytopeError::EmptyPolytope)
        );
        let half = HPolytope::new(DMatrix::from_row_slice(1, 1, &[1.0]), v(&[0.0])).unwrap();
        assert_eq!(half.chebyshev_center(), Err(PolytopeError::UnboundedPolytope));
    }

    #[test]
    fn redundancy_examples() {
        let p = HPolytope::new(
            DMatrix::from_row_slice(3, 1, &[1.0, 1.0, -1.0]),
            v(&[1.0, 2.0, 0.0]),
        )
        .unwrap();
        let r = p.remove_redundant().unwrap();
        assert_eq!(r.num_rows(), 2);
        assert!(r.contains_point(&v(&[1.0]), 1e-12).unwrap());
        assert!(!r.contains_point(&v(&[1.5]), 1e-8).unwrap());
        let sq = unit_square();
        assert_eq!(sq.remove_redundant().unwrap().num_rows(), 4);
    }

    #[test]
    fn fm_single_combination() {
        // x + u <= 1, -u <= 0, u <= 1, -x <= 0  ->  0 <= x <= 1
        let p = HPolytope::new(
            DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 0.0, -1.0, 0.0, 1.0, -1.0, 0.0]),
            v(&[1.0, 0.0, 1.0, 0.0]),
        )
        .unwrap();
        let x = p.project(&[0]).unwrap();
        let bb = x.bounding_box().unwrap();
        assert_relative_eq!(bb.lower()[0], 0.0, epsilon = 1e-12);
        assert_relative_eq!(bb.upper()[0], 1.0, epsilon = 1e-12);
        let all = p.project(&[0, 1]).unwrap();
        for dir in [[1.0, 0.3], [-0.2, 1.0], [-1.0, -1.0]] {
            let d = v(&dir);
            assert_relative_eq!(
                all.support(&d).unwrap().finite().unwrap(),
                p.support(&d).unwrap().finite().unwrap(),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn projection_keeps_column_order() {
        let b = HPolytope::from_interval_box(&[0.0, 10.0, 20.0], &[1.0, 11.0, 21.0]).unwrap();
        let p = b.project(&[2, 0]).unwrap();
        let bb = p.bounding_box().unwrap();
        assert_relative_eq!(bb.lower()[0], 20.0, epsilon = 1e-12);
        assert_relative_eq!(bb.lower()[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bounding_box_examples() {
        let bb = unit_square().bounding_box().unwrap();
        assert_relative_eq!(bb.center[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(bb.radii[1], 0.5, epsilon = 1e-12);
        let diamond = HPolytope::new(
            DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0]),
            v(&[1.0, 1.0, 1.0, 1.0]),
        )
        .unwrap();
        let bb = diamond.bounding_box().unwrap();
        assert_relative_eq!(bb.radii[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(bb.radii[1], 1.0, epsilon = 1e-12);
        let half = HPolytope::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), v(&[0.0])).unwrap();
        assert_eq!(half.bounding_box(), Err(PolytopeError::UnboundedPolytope));
    }

    #[test]
    fn rotated_box_grid_and_fallback() {
        let mut pts = Vec::new();
        for i in 0..5 {
            for j in 0..3 {
                pts.push(v(&[i as f64, 2.0 * j as f64]));
            }
        }
        let rb = rotated_bounding_box(&pts).unwrap();
        assert!(!rb.degenerate);
        let bb = rb.polytope.bounding_box().unwrap();
        assert_relative_eq!(bb.lower()[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(bb.upper()[0], 4.0, epsilon = 1e-9);
        assert_relative_eq!(bb.upper()[1], 4.0, epsilon = 1e-9);
        // Axes are coordinate axes up to order.
        for j in 0..2 {
            let col = rb.axes.column(j);
            assert!(col.iter().filter(|x| x.abs() > 1e-9).count() == 1);
        }
        let two = vec![v(&[0.0, 0.0]), v(&[1.0, 1.0])];
        let rb = rotated_bounding_box(&two).unwrap();
        assert!(rb.degenerate);
        for p in &two {
            assert!(rb.polytope.contains_point(p, 0.0).unwrap());
        }
        assert!(matches!(
            rotated_bounding_box(&two[..1]),
            Err(PolytopeError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn rotated_box_recovers_rotation() {
        let theta = 30f64.to_radians();
        let (c, s) = (theta.cos(), theta.sin());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts: Vec<DVector<f64>> = (0..2000)
            .map(|_| {
                let a: f64 = rng.gen_range(-3.0..3.0);
                let b: f64 = rng.gen_range(-1.0..1.0);
                v(&[c * a - s * b, s * a + c * b])
            })
            .collect();
        let rb = rotated_bounding_box(&pts).unwrap();
        let major = rb.axes.column(0);
        let angle = major[1].atan2(major[0]).to_degrees();
        let err = (angle - 30.0).abs().min((angle + 150.0).abs());
        assert!(err < 2.0, "axis angle {angle}");
        for p in &pts {
            assert!(rb.polytope.contains_point(p, 1e-9).unwrap());
        }
    }

    #[test]
    fn contains_point_tolerance() {
        let sq = HPolytope::from_interval_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let tol = MEMBERSHIP_TOL;
        assert!(sq.contains_point(&v(&[0.0, 0.0]), tol).unwrap());
        assert!(!sq.contains_point(&v(&[1.0 + 2.0 * tol, 0.0]), tol).unwrap());
        assert!(sq.contains_point(&v(&[1.0 + 0.5 * tol, 0.0]), tol).unwrap());
        assert!(sq.contains_point(&v(&[0.0]), tol).is_err());
    }

    #[test]
    fn split_examples() {
        let rect = HPolytope::from_interval_box(&[0.0, 0.0], &[2.0, 1.0]).unwrap();
        let (c, _) = rect.chebyshev_center().unwrap();
        let (a, b) = rect.split_through_center().unwrap();
        let ba = a.bounding_box().unwrap();
        let bbb = b.bounding_box().unwrap();
        assert_relative_eq!(ba.upper()[0], c[0], epsilon = 1e-12);
        assert_relative_eq!(bbb.lower()[0], c[0], epsilon = 1e-12);
        assert_relative_eq!(ba.upper()[1], 1.0, epsilon = 1e-12);
        let (a, _) = unit_square().split_through_center().unwrap();
        let ba = a.bounding_box().unwrap();
        assert_relative_eq!(ba.upper()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(ba.upper()[1], 1.0, epsilon = 1e-12);
        assert_eq!(
            HPolytope::empty(2).split_through_center().unwrap_err(),
            PolytopeError::EmptyPolytope
        );
    }

    #[test]
    fn union_volume() {
        let b = BoxSet::from_bounds(&[0.0, 0.0], &[2.0, 1.0]).unwrap();
        let full = PolyUnion::new(2, vec![b.to_polytope()]).unwrap();
        assert_relative_eq!(full.volume_estimate(&b, 1000, 3), 2.0);
        assert_eq!(PolyUnion::empty(2).volume_estimate(&b, 1000, 3), 0.0);
        let half = PolyUnion::new(
            2,
            vec![HPolytope::from_interval_box(&[0.0, 0.0], &[1.0, 1.0]).unwrap()],
        )
        .unwrap();
        let est = half.volume_estimate(&b, 100_000, 11);
        assert!((est - 1.0).abs() < 0.02, "{est}");
        assert_eq!(est, half.volume_estimate(&b, 100_000, 11));
    }

    #[test]
    fn vertex_loop_square() {
        let loop_ = unit_square().vertex_loop_2d().unwrap();
        assert_eq!(loop_.len(), 4);
        let area: f64 = (0..4)
            .map(|i| {
                let (p, q) = (loop_[i], loop_[(i + 1) % 4]);
                p[0] * q[1] - q[0] * p[1]
            })
            .sum::<f64>()
            * 0.5;
        assert_relative_eq!(area, 1.0, epsilon = 1e-12);
        assert!(HPolytope::empty(2).vertex_loop_2d().unwrap().is_empty());
    }

    #[test]
    fn json_shapes() {
        let p = HPolytope::from_interval_box(&[-1.0], &[1.0]).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(s, r#"{"dim":1,"H":[[1.0],[-1.0]],"h":[1.0,1.0]}"#);
        let back: HPolytope = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        let b = BoxSet::new(v(&[0.5]), v(&[0.25])).unwrap();
        assert_eq!(
            serde_json::to_string(&b).unwrap(),
            r#"{"center":[0.5],"radii":[0.25]}"#
        );
        let u = PolyUnion::new(1, vec![p]).unwrap();
        let s = serde_json::to_string(&u).unwrap();
        assert!(s.starts_with(r#"{"pieces":[{"dim":1"#));
        assert!(serde_json::from_str::<BoxSet>(r#"{"center":[0.0],"radii":[-1.0]}"#).is_err());
        assert!(serde_json::from_str::<HPolytope>(r#"{"dim":2,"H":[[1.0]],"h":[1.0]}"#).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn cuts(d: usize) -> impl Strategy<Value = HPolytope> {
            prop::collection::vec((prop::collection::vec(-1.0f64..1.0, d), 0.5f64..2.0), d + 1..40).prop_filter_map(
                "degenerate normal",
                move |rows| {
                    if rows.iter().any(|(a, _)| a.iter().map(|v| v * v).sum::<f64>() < 1e-4) {
                        return None;
                    }
                    let normals = DMatrix::from_fn(rows.len(), d, |i, j| rows[i].0[j]);
                    let offsets = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));
                    HPolytope::new(normals, offsets).ok()
                },
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn ray_shooting_matches_exhaustive(p in cuts(3)) {
                let n = p.normalized_unique();
                let center = n.chebyshev_center();
                prop_assume!(matches!(center, Ok((_, r)) if r > 1e-6));
                let (c, _) = center.unwrap();
                prop_assert_eq!(n.facets_by_ray_shooting(&c).unwrap(), n.facets_exhaustive().unwrap());
            }

            #[test]
            fn reduction_keeps_membership(p in cuts(2), pts in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 50)) {
                let q = p.remove_redundant().unwrap();
                prop_assert!(q.num_rows() <= p.num_rows());
                for (x, y) in pts {
                    let x = v(&[x, y]);
                    // Points on a boundary may flip within tolerance.
                    let margin = p.max_violation(&x).abs();
                    if margin > 1e-7 {
                        prop_assert_eq!(p.contains_point(&x, 0.0).unwrap(), q.contains_point(&x, 0.0).unwrap());
                    }
                }
            }

            #[test]
            fn projection_contains_projected_points(p in cuts(3), pts in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 40)) {
                let q = p.project(&[0, 2]).unwrap();
                for x in pts {
                    let x = DVector::from_vec(x);
                    if p.max_violation(&x) <= 0.0 {
                        prop_assert!(q.max_violation(&v(&[x[0], x[2]])) <= 1e-7);
                    }
                }
            }
        }
    }
}
