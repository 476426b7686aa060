//! Dense two-phase simplex.
//!
//! Programs have the form `min/max c·x  s.t.  G x <= g,  E x = e` with free
//! variables. They are brought to standard form by splitting every variable
//! into a nonnegative pair and adding one slack per inequality row; equality
//! rows enter as two opposite inequalities. Pivoting follows Bland's rule so
//! degenerate programs cannot cycle, and the final basis is re-solved with an
//! LU factorization against the unmodified standard-form columns to remove
//! accumulated tableau round-off.
//!
//! The sizes met in this crate are small (a few hundred rows, tens of
//! variables), so everything is dense.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Per-row feasibility tolerance for reported optimal points.
pub const FEASIBILITY_TOL: f64 = 1e-8;
/// Entries at or below this magnitude are never pivoted on.
pub const PIVOT_TOL: f64 = 1e-10;
/// Relative tolerance for objective comparisons.
pub const OBJECTIVE_REL_TOL: f64 = 1e-9;

const REDUCED_COST_TOL: f64 = 1e-9;
const ITERATION_FACTOR: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("simplex did not terminate within {0} pivots")]
    NumericalFailure(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite coefficient in linear program")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

/// A linear program over free variables.
#[derive(Debug, Clone)]
pub struct LinearProgram {
    sense: Sense,
    objective: DVector<f64>,
    ineq: DMatrix<f64>,
    ineq_rhs: DVector<f64>,
    eq: DMatrix<f64>,
    eq_rhs: DVector<f64>,
}

impl LinearProgram {
    pub fn new(sense: Sense, objective: DVector<f64>) -> Self {
        let d = objective.len();
        Self {
            sense,
            objective,
            ineq: DMatrix::zeros(0, d),
            ineq_rhs: DVector::zeros(0),
            eq: DMatrix::zeros(0, d),
            eq_rhs: DVector::zeros(0),
        }
    }

    pub fn minimize(objective: DVector<f64>) -> Self {
        Self::new(Sense::Minimize, objective)
    }

    pub fn maximize(objective: DVector<f64>) -> Self {
        Self::new(Sense::Maximize, objective)
    }

    /// Appends rows `matrix · x <= rhs`.
    pub fn with_inequalities(mut self, matrix: &DMatrix<f64>, rhs: &DVector<f64>) -> Self {
        self.ineq = stack_rows(&self.ineq, matrix);
        self.ineq_rhs = stack_vec(&self.ineq_rhs, rhs);
        self
    }

    /// Appends rows `matrix · x = rhs`.
    pub fn with_equalities(mut self, matrix: &DMatrix<f64>, rhs: &DVector<f64>) -> Self {
        self.eq = stack_rows(&self.eq, matrix);
        self.eq_rhs = stack_vec(&self.eq_rhs, rhs);
        self
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn sense(&self) -> Sense {
        self.sense
    }

    pub fn objective(&self) -> &DVector<f64> {
        &self.objective
    }

    pub fn inequalities(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.ineq, &self.ineq_rhs)
    }

    pub fn equalities(&self) -> (&DMatrix<f64>, &DVector<f64>) {
        (&self.eq, &self.eq_rhs)
    }

    fn validate(&self) -> Result<(), LpError> {
        let d = self.objective.len();
        if d == 0 {
            return Err(LpError::DimensionMismatch("program has no variables".into()));
        }
        if self.ineq.ncols() != d || self.eq.ncols() != d {
            return Err(LpError::DimensionMismatch(format!(
                "constraint rows must have {d} columns"
            )));
        }
        if self.ineq.nrows() != self.ineq_rhs.len() || self.eq.nrows() != self.eq_rhs.len() {
            return Err(LpError::DimensionMismatch(
                "row count differs from right-hand side length".into(),
            ));
        }
        let all_finite = self.objective.iter().all(|v| v.is_finite())
            && self.ineq.iter().all(|v| v.is_finite())
            && self.ineq_rhs.iter().all(|v| v.is_finite())
            && self.eq.iter().all(|v| v.is_finite())
            && self.eq_rhs.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(LpError::NonFinite);
        }
        Ok(())
    }

    /// Largest violation of any row (inequality or equality) at `x`.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.ineq.nrows() {
            let lhs = self.ineq.row(i).transpose().dot(x);
            worst = worst.max(lhs - self.ineq_rhs[i]);
        }
        for i in 0..self.eq.nrows() {
            let lhs = self.eq.row(i).transpose().dot(x);
            worst = worst.max((lhs - self.eq_rhs[i]).abs());
        }
        worst
    }
}

fn stack_rows(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = if top.nrows() == 0 && bottom.nrows() > 0 {
        bottom.ncols()
    } else {
        top.ncols()
    };
    let mut out = DMatrix::zeros(top.nrows() + bottom.nrows(), cols.max(bottom.ncols()));
    out.view_mut((0, 0), (top.nrows(), top.ncols())).copy_from(top);
    out.view_mut((top.nrows(), 0), (bottom.nrows(), bottom.ncols()))
        .copy_from(bottom);
    out
}

fn stack_vec(top: &DVector<f64>, bottom: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(
        top.len() + bottom.len(),
        top.iter().chain(bottom.iter()).copied(),
    )
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Optimizer, present iff `status == Optimal`.
    pub point: Option<DVector<f64>>,
    /// `objective · point` when optimal; `±inf` otherwise.
    pub objective_value: f64,
    pub iterations: usize,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

/// Solves `lp` with the two-phase method.
pub fn solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    lp.validate()?;
    let sign = match lp.sense {
        Sense::Minimize => 1.0,
        Sense::Maximize => -1.0,
    };
    let rows = match RowSet::build(lp) {
        Some(rows) => rows,
        None => return Ok(infeasible(lp.sense, 0)),
    };
    let cap = ITERATION_FACTOR * (rows.len() + lp.num_vars());
    let mut tab = Tableau::new(&rows, lp.num_vars(), &(lp.objective.clone() * sign));
    let mut iterations = tab.run(Phase::One, cap)?;
    if tab.phase_one_value() > FEASIBILITY_TOL {
        return Ok(infeasible(lp.sense, iterations));
    }
    tab.drive_out_artificials();
    match tab.run(Phase::Two, cap.saturating_sub(iterations).max(1)) {
        Ok(extra) => iterations += extra,
        Err(LpError::NumericalFailure(_)) => return Err(LpError::NumericalFailure(cap)),
        Err(e) => return Err(e),
    }
    if tab.unbounded {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            point: None,
            objective_value: -sign * f64::INFINITY,
            iterations,
        });
    }
    let x = tab.primal_point(&rows);
    let value = lp.objective.dot(&x);
    Ok(LpSolution {
        status: LpStatus::Optimal,
        point: Some(x),
        objective_value: value,
        iterations,
    })
}

/// Optimal value of the phase-one problem (sum of artificial variables).
///
/// Zero (up to tolerance) iff the constraints of `lp` are feasible; the
/// objective of `lp` is ignored.
pub fn phase_one_value(lp: &LinearProgram) -> Result<f64, LpError> {
    lp.validate()?;
    let rows = match RowSet::build(lp) {
        Some(rows) => rows,
        None => return Ok(f64::INFINITY),
    };
    let cap = ITERATION_FACTOR * (rows.len() + lp.num_vars());
    let zero = DVector::zeros(lp.num_vars());
    let mut tab = Tableau::new(&rows, lp.num_vars(), &zero);
    tab.run(Phase::One, cap)?;
    Ok(tab.phase_one_value())
}

fn infeasible(sense: Sense, iterations: usize) -> LpSolution {
    LpSolution {
        status: LpStatus::Infeasible,
        point: None,
        objective_value: match sense {
            Sense::Minimize => f64::INFINITY,
            Sense::Maximize => f64::NEG_INFINITY,
        },
        iterations,
    }
}

/// Scaled inequality rows `a·x <= b`, each with unit max-norm.
struct RowSet {
    coeffs: Vec<Vec<f64>>,
    rhs: Vec<f64>,
}

impl RowSet {
    /// Returns `None` when some all-zero row is violated.
    fn build(lp: &LinearProgram) -> Option<Self> {
        let d = lp.num_vars();
        let mut coeffs = Vec::new();
        let mut rhs = Vec::new();
        let mut push = |row: Vec<f64>, b: f64| -> bool {
            let scale = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if scale <= PIVOT_TOL {
                return b >= -FEASIBILITY_TOL;
            }
            coeffs.push(row.iter().map(|v| v / scale).collect());
            rhs.push(b / scale);
            true
        };
        for i in 0..lp.ineq.nrows() {
            let row: Vec<f64> = (0..d).map(|j| lp.ineq[(i, j)]).collect();
            if !push(row, lp.ineq_rhs[i]) {
                return None;
            }
        }
        for i in 0..lp.eq.nrows() {
            let row: Vec<f64> = (0..d).map(|j| lp.eq[(i, j)]).collect();
            let neg: Vec<f64> = row.iter().map(|v| -v).collect();
            if !push(row, lp.eq_rhs[i]) || !push(neg, -lp.eq_rhs[i]) {
                return None;
            }
        }
        Some(Self { coeffs, rhs })
    }

    fn len(&self) -> usize {
        self.rhs.len()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    One,
    Two,
}

/// Column layout: `[x+ (d) | x- (d) | slack (rows) | artificial (k)]`.
struct Tableau {
    nrows: usize,
    ncols: usize,
    /// Row-major, `ncols + 1` entries per row, right-hand side last.
    data: Vec<f64>,
    basis: Vec<usize>,
    /// Original constraint row behind each tableau row.
    origin: Vec<usize>,
    /// Sign applied to the original row (-1 when the rhs was negative).
    flip: Vec<f64>,
    phase_one: Vec<f64>,
    cost: Vec<f64>,
    nvars: usize,
    first_artificial: usize,
    unbounded: bool,
}

impl Tableau {
    fn new(rows: &RowSet, nvars: usize, cost: &DVector<f64>) -> Self {
        let m = rows.len();
        let n_art = rows.rhs.iter().filter(|b| **b < 0.0).count();
        let first_artificial = 2 * nvars + m;
        let ncols = first_artificial + n_art;
        let stride = ncols + 1;
        let mut data = vec![0.0; m * stride];
        let mut basis = vec![0; m];
        let mut flip = vec![1.0; m];
        let mut phase_one = vec![0.0; stride];
        let mut next_art = first_artificial;
        for i in 0..m {
            let s = if rows.rhs[i] < 0.0 { -1.0 } else { 1.0 };
            flip[i] = s;
            let row = &mut data[i * stride..(i + 1) * stride];
            for j in 0..nvars {
                row[j] = s * rows.coeffs[i][j];
                row[nvars + j] = -s * rows.coeffs[i][j];
            }
            row[2 * nvars + i] = s;
            row[ncols] = s * rows.rhs[i];
            if s < 0.0 {
                row[next_art] = 1.0;
                basis[i] = next_art;
                next_art += 1;
                for (acc, v) in phase_one.iter_mut().zip(row.iter()) {
                    *acc -= v;
                }
            } else {
                basis[i] = 2 * nvars + i;
            }
        }
        phase_one[first_artificial..ncols].fill(0.0);
        let mut cost_row = vec![0.0; stride];
        for j in 0..nvars {
            cost_row[j] = cost[j];
            cost_row[nvars + j] = -cost[j];
        }
        Self {
            nrows: m,
            ncols,
            data,
            basis,
            origin: (0..m).collect(),
            flip,
            phase_one,
            cost: cost_row,
            nvars,
            first_artificial,
            unbounded: false,
        }
    }

    fn stride(&self) -> usize {
        self.ncols + 1
    }

    fn phase_one_value(&self) -> f64 {
        -self.phase_one[self.ncols]
    }

    fn run(&mut self, phase: Phase, cap: usize) -> Result<usize, LpError> {
        let mut iterations = 0;
        loop {
            let Some(enter) = self.entering(phase) else {
                return Ok(iterations);
            };
            let Some(leave) = self.leaving(enter) else {
                if phase == Phase::Two {
                    self.unbounded = true;
                    return Ok(iterations);
                }
                // Phase one is bounded below by zero, so a column without
                // a ratio only carries a round-off reduced cost: the
                // current basis is already optimal.
                return Ok(iterations);
            };
            self.pivot(leave, enter);
            iterations += 1;
            if iterations >= cap {
                return Err(LpError::NumericalFailure(iterations));
            }
        }
    }

    /// Bland: lowest-index column with a negative reduced cost.
    fn entering(&self, phase: Phase) -> Option<usize> {
        let row = match phase {
            Phase::One => &self.phase_one,
            Phase::Two => &self.cost,
        };
        let limit = match phase {
            Phase::One => self.ncols,
            Phase::Two => self.first_artificial,
        };
        (0..limit).find(|&j| row[j] < -REDUCED_COST_TOL)
    }

    /// Minimum ratio; ties go to the lowest-index basic variable.
    fn leaving(&self, col: usize) -> Option<usize> {
        let stride = self.stride();
        let mut best: Option<(f64, usize)> = None;
        for i in 0..self.nrows {
            let a = self.data[i * stride + col];
            if a <= PIVOT_TOL {
                continue;
            }
            let ratio = self.data[i * stride + self.ncols].max(0.0) / a;
            best = match best {
                None => Some((ratio, i)),
                Some((r, k)) => {
                    let tie = (ratio - r).abs() <= 1e-12 * (1.0 + r.abs());
                    if (tie && self.basis[i] < self.basis[k]) || (!tie && ratio < r) {
                        Some((ratio.min(r), i))
                    } else {
                        Some((r, k))
                    }
                }
            };
        }
        best.map(|(_, i)| i)
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let stride = self.stride();
        let p = self.data[r * stride + c];
        let (before, rest) = self.data.split_at_mut(r * stride);
        let (prow, after) = rest.split_at_mut(stride);
        for v in prow.iter_mut() {
            *v /= p;
        }
        prow[c] = 1.0;
        let eliminate = |row: &mut [f64]| {
            let f = row[c];
            if f != 0.0 {
                for (v, q) in row.iter_mut().zip(prow.iter()) {
                    *v -= f * q;
                }
                row[c] = 0.0;
            }
        };
        for row in before.chunks_mut(stride).chain(after.chunks_mut(stride)) {
            eliminate(row);
            let last = row.len() - 1;
            if row[last] < 0.0 && row[last] > -1e-11 {
                row[last] = 0.0;
            }
        }
        eliminate(&mut self.phase_one);
        eliminate(&mut self.cost);
        self.basis[r] = c;
    }

    /// Pivots zero-level artificials out of the basis; drops rows that are
    /// linearly dependent on the others.
    fn drive_out_artificials(&mut self) {
        let stride = self.stride();
        let mut r = 0;
        while r < self.nrows {
            if self.basis[r] < self.first_artificial {
                r += 1;
                continue;
            }
            let row = &self.data[r * stride..(r + 1) * stride];
            let candidate = (0..self.first_artificial)
                .filter(|&j| row[j].abs() > PIVOT_TOL)
                .max_by(|&a, &b| row[a].abs().total_cmp(&row[b].abs()));
            match candidate {
                Some(j) => {
                    self.pivot(r, j);
                    r += 1;
                }
                None => {
                    self.data.drain(r * stride..(r + 1) * stride);
                    self.basis.remove(r);
                    self.origin.remove(r);
                    self.flip.remove(r);
                    self.nrows -= 1;
                }
            }
        }
    }

    /// Reads the basic solution, re-solving the basis against the original
    /// standard-form columns when the factorization succeeds.
    fn primal_point(&self, rows: &RowSet) -> DVector<f64> {
        let stride = self.stride();
        let m = self.nrows;
        let mut values: Vec<f64> = (0..m).map(|i| self.data[i * stride + self.ncols]).collect();
        if m > 0 {
            let column = |j: usize, i: usize| -> f64 {
                let o = self.origin[i];
                let s = self.flip[i];
                if j < self.nvars {
                    s * rows.coeffs[o][j]
                } else if j < 2 * self.nvars {
                    -s * rows.coeffs[o][j - self.nvars]
                } else if j < self.first_artificial {
                    if j - 2 * self.nvars == o {
                        s
                    } else {
                        0.0
                    }
                } else {
                    0.0
                }
            };
            let basis_matrix = DMatrix::from_fn(m, m, |i, k| column(self.basis[k], i));
            let rhs = DVector::from_fn(m, |i, _| self.flip[i] * rows.rhs[self.origin[i]]);
            if self.basis.iter().all(|&j| j < self.first_artificial) {
                if let Some(sol) = basis_matrix.lu().solve(&rhs) {
                    if sol.iter().all(|v| v.is_finite())
                        && sol.iter().zip(values.iter()).all(|(a, b)| (a - b).abs() < 1e-6)
                    {
                        values = sol.iter().copied().collect();
                    }
                }
            }
        }
        let mut x = DVector::zeros(self.nvars);
        for (i, &j) in self.basis.iter().enumerate() {
            if j < self.nvars {
                x[j] += values[i];
            } else if j < 2 * self.nvars {
                x[j - self.nvars] -= values[i];
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    #[test]
    fn interval_endpoint() {
        let lp = LinearProgram::minimize(DVector::from_vec(vec![1.0]))
            .with_inequalities(&mat(&[&[-1.0], &[1.0]]), &DVector::from_vec(vec![-2.0, 5.0]));
        let sol = solve(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert_relative_eq!(sol.point.unwrap()[0], 2.0, epsilon = 1e-12);
        assert_relative_eq!(sol.objective_value, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let lp = LinearProgram::minimize(DVector::from_vec(vec![0.0]))
            .with_inequalities(&mat(&[&[1.0], &[-1.0]]), &DVector::from_vec(vec![-1.0, -1.0]));
        let sol = solve(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Infeasible);
        assert!(sol.point.is_none());
        assert!(phase_one_value(&lp).unwrap() > FEASIBILITY_TOL);
    }

    #[test]
    fn active_constraint() {
        let lp = LinearProgram::minimize(DVector::from_vec(vec![1.0, 1.0])).with_inequalities(
            &mat(&[&[-1.0, -1.0], &[-1.0, 0.0], &[0.0, -1.0]]),
            &DVector::from_vec(vec![-1.0, 0.0, 0.0]),
        );
        let sol = solve(&lp).unwrap();
        assert_relative_eq!(sol.objective_value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unbounded_direction() {
        let lp = LinearProgram::maximize(DVector::from_vec(vec![1.0, 0.0]))
            .with_inequalities(&mat(&[&[-1.0, 0.0]]), &DVector::from_vec(vec![0.0]));
        let sol = solve(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Unbounded);
        assert_eq!(sol.objective_value, f64::INFINITY);
    }

    #[test]
    fn equality_rows() {
        // min x + 2y  s.t. x + y = 1, x <= 0.25, y >= 0
        let lp = LinearProgram::minimize(DVector::from_vec(vec![1.0, 2.0]))
            .with_inequalities(
                &mat(&[&[1.0, 0.0], &[0.0, -1.0]]),
                &DVector::from_vec(vec![0.25, 0.0]),
            )
            .with_equalities(&mat(&[&[1.0, 1.0]]), &DVector::from_vec(vec![1.0]));
        let sol = solve(&lp).unwrap();
        let x = sol.point.unwrap();
        assert_relative_eq!(x[0], 0.25, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.75, epsilon = 1e-12);
    }

    #[test]
    fn zero_row_handling() {
        let ok = LinearProgram::minimize(DVector::from_vec(vec![1.0]))
            .with_inequalities(&mat(&[&[0.0], &[-1.0]]), &DVector::from_vec(vec![1.0, 3.0]));
        assert_relative_eq!(solve(&ok).unwrap().objective_value, -3.0, epsilon = 1e-12);
        let bad = LinearProgram::minimize(DVector::from_vec(vec![1.0]))
            .with_inequalities(&mat(&[&[0.0]]), &DVector::from_vec(vec![-1.0]));
        assert_eq!(solve(&bad).unwrap().status, LpStatus::Infeasible);
    }

    #[test]
    fn degenerate_vertex_terminates() {
        // Many constraints through the optimal vertex (0, 0).
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|k| {
                let t = k as f64 * 0.25;
                vec![-t.cos(), -t.sin().abs()]
            })
            .collect();
        let g = DMatrix::from_fn(12, 2, |i, j| rows[i][j]);
        let lp = LinearProgram::minimize(DVector::from_vec(vec![1.0, 1.0]))
            .with_inequalities(&g, &DVector::zeros(12))
            .with_inequalities(&mat(&[&[-1.0, 0.0], &[0.0, -1.0]]), &DVector::zeros(2));
        let sol = solve(&lp).unwrap();
        assert_eq!(sol.status, LpStatus::Optimal);
        assert!(sol.objective_value.abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_dimensions() {
        let lp = LinearProgram::minimize(DVector::from_vec(vec![1.0, 1.0]))
            .with_inequalities(&mat(&[&[1.0, 0.0]]), &DVector::from_vec(vec![1.0, 2.0]));
        assert!(matches!(solve(&lp), Err(LpError::DimensionMismatch(_))));
        let empty = LinearProgram::minimize(DVector::zeros(0));
        assert!(matches!(solve(&empty), Err(LpError::DimensionMismatch(_))));
    }

    #[test]
    fn resolve_is_bit_identical() {
        let lp = LinearProgram::maximize(DVector::from_vec(vec![0.3, -1.7, 2.2]))
            .with_inequalities(
                &mat(&[
                    &[1.0, 2.0, 0.5],
                    &[-0.3, 1.0, 1.0],
                    &[0.7, -0.2, 1.5],
                    &[-1.0, 0.0, 0.0],
                    &[0.0, -1.0, 0.0],
                    &[0.0, 0.0, -1.0],
                ]),
                &DVector::from_vec(vec![4.0, 2.0, 3.0, 0.0, 1.0, 0.5]),
            );
        let a = solve(&lp).unwrap();
        let b = solve(&lp).unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.objective_value.to_bits(), b.objective_value.to_bits());
    }
}
