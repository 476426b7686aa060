//! Lifted linear over-approximations of sampled nonlinear systems, implicit
//! backward reachable sets built from them, and the controllers they
//! certify.
//!
//! The usual flow is [`experiment::generate_data`] → [`experiment::fit`] →
//! [`experiment::compute_brs`] → [`control::simulate_closed_loop`].

// Negated float comparisons are how parameter checks reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod control;
pub mod data;
pub mod evt;
pub mod experiment;
pub mod koopman;
pub mod lifting;
pub mod lp;
pub mod polytope;
pub mod reach;
pub mod systems;

pub use control::{ControlError, Trajectory, TrajectorySummary};
pub use data::{DataError, Dataset, Sampling};
pub use experiment::{ExperimentConfig, ExportBundle, FitReport, Mode};
pub use koopman::{KoopmanError, KoopmanModel};
pub use lifting::{Lifting, LiftingError, Observable};
pub use polytope::{BoxSet, HPolytope, PolyUnion, PolytopeError};
pub use reach::{BrsPiece, BrsResult, ReachError};
pub use systems::{Dynamics, SystemSpec};

/// Any failure of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Koopman(#[from] KoopmanError),
    #[error(transparent)]
    Reach(#[from] ReachError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Lifting(#[from] LiftingError),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }
}
