//! Transition datasets `(x, u, x⁺)` with CSV input/output.

use std::io::{Read, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::polytope::BoxSet;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("row {row}: expected {expected} columns, found {found}")]
    RowLength { row: usize, expected: usize, found: usize },
    #[error("bad CSV header: {0}")]
    Header(String),
    #[error("row {row}: non-finite or unparsable value")]
    BadValue { row: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("grid would have {count} points, cap is {cap}")]
    GridTooLarge { count: u128, cap: u128 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// How the `(x, u)` samples were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    /// Tensor grid over the box `[lo, hi]` of `(x, u)`; `axes[j]` holds the
    /// sorted grid values of coordinate `j`.
    Grid {
        lo: Vec<f64>,
        hi: Vec<f64>,
        axes: Vec<Vec<f64>>,
    },
    Random {
        seed: u64,
    },
    Unknown,
}

/// Flat storage of transition triples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    m: usize,
    xs: Vec<f64>,
    us: Vec<f64>,
    xps: Vec<f64>,
    pub sampling: Sampling,
}

impl Dataset {
    pub fn new(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            xs: Vec::new(),
            us: Vec::new(),
            xps: Vec::new(),
            sampling: Sampling::Unknown,
        }
    }

    pub fn with_capacity(n: usize, m: usize, cap: usize) -> Self {
        Self {
            n,
            m,
            xs: Vec::with_capacity(cap * n),
            us: Vec::with_capacity(cap * m),
            xps: Vec::with_capacity(cap * n),
            sampling: Sampling::Unknown,
        }
    }

    pub fn push(&mut self, x: &[f64], u: &[f64], x_plus: &[f64]) -> Result<(), DataError> {
        for (got, want) in [(x.len(), self.n), (u.len(), self.m), (x_plus.len(), self.n)] {
            if got != want {
                return Err(DataError::DimensionMismatch { expected: want, found: got });
            }
        }
        self.xs.extend_from_slice(x);
        self.us.extend_from_slice(u);
        self.xps.extend_from_slice(x_plus);
        Ok(())
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.xs.len().checked_div(self.n).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.xs[k * self.n..(k + 1) * self.n]
    }

    pub fn u(&self, k: usize) -> &[f64] {
        &self.us[k * self.m..(k + 1) * self.m]
    }

    pub fn x_plus(&self, k: usize) -> &[f64] {
        &self.xps[k * self.n..(k + 1) * self.n]
    }

    pub fn x_vec(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.x(k))
    }

    pub fn u_vec(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.u(k))
    }

    pub fn x_plus_vec(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.x_plus(k))
    }

    /// Stacked `(x, u)`.
    pub fn xu_vec(&self, k: usize) -> DVector<f64> {
        DVector::from_iterator(self.n + self.m, self.x(k).iter().chain(self.u(k)).copied())
    }

    /// Triples at `indices`, in that order. Sampling metadata is dropped.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut out = Dataset::with_capacity(self.n, self.m, indices.len());
        for &k in indices {
            out.xs.extend_from_slice(self.x(k));
            out.us.extend_from_slice(self.u(k));
            out.xps.extend_from_slice(self.x_plus(k));
        }
        out
    }

    /// Smallest box containing every `(x, u)`.
    pub fn xu_bounds(&self) -> Result<BoxSet, DataError> {
        if self.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let d = self.n + self.m;
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for k in 0..self.len() {
            for (j, v) in self.x(k).iter().chain(self.u(k)).enumerate() {
                lo[j] = lo[j].min(*v);
                hi[j] = hi[j].max(*v);
            }
        }
        Ok(BoxSet::from_bounds(&lo, &hi).expect("ordered bounds"))
    }

    pub fn header(&self) -> Vec<String> {
        (1..=self.n)
            .map(|i| format!("x{i}"))
            .chain((1..=self.m).map(|i| format!("u{i}")))
            .chain((1..=self.n).map(|i| format!("xp{i}")))
            .collect()
    }

    /// Header `x1..xn,u1..um,xp1..xpn`, one triple per line.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), DataError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(self.header())?;
        for k in 0..self.len() {
            let rec: Vec<String> = self
                .x(k)
                .iter()
                .chain(self.u(k))
                .chain(self.x_plus(k))
                .map(|v| format!("{v:?}"))
                .collect();
            wr.write_record(rec)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Dataset, DataError> {
        let mut rd = csv::Reader::from_reader(r);
        let header: Vec<String> = rd.headers()?.iter().map(|s| s.trim().to_string()).collect();
        let count = |prefix: &str| {
            header
                .iter()
                .filter(|h| {
                    h.strip_prefix(prefix)
                        .is_some_and(|rest| rest.parse::<usize>().is_ok())
                })
                .count()
        };
        let n = count("xp");
        let m = count("u");
        let mut ds = Dataset::new(n, m);
        if n == 0 || ds.header() != header {
            return Err(DataError::Header(header.join(",")));
        }
        let width = 2 * n + m;
        for (row, rec) in rd.records().enumerate() {
            let rec = rec?;
            if rec.len() != width {
                return Err(DataError::RowLength { row: row + 1, expected: width, found: rec.len() });
            }
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                .collect::<Option<Vec<f64>>>()
                .ok_or(DataError::BadValue { row: row + 1 })?;
            ds.push(&vals[..n], &vals[n..n + m], &vals[n + m..])?;
        }
        Ok(ds)
    }
}
