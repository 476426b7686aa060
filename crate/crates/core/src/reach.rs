//! Implicit backward reachable sets in the lifted space.
//!
//! Layer `k` of a [`BrsResult`] is a flat union of lifted polytopes. Every
//! piece remembers the model that produced it and the piece of layer `k-1`
//! it steers into, which is all the controller needs at run time.

use std::collections::BTreeMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::koopman::{
    fit_local, restrict_dataset, GlobalFit, KoopmanError, KoopmanModel, LocalFitConfig, Provenance,
};
use crate::lifting::{Lifting, LiftingError};
use crate::polytope::{rotated_bounding_box, HPolytope, PolytopeError, MEMBERSHIP_TOL};

/// Default limit on nested splits of one piece within a layer.
pub const DEFAULT_MAX_SPLITS: usize = 6;

#[derive(Debug, Error)]
pub enum ReachError {
    #[error("horizon must be at least 1")]
    InvalidHorizon,
    #[error("only {found} tuples map into the piece, need 2")]
    TooFewTuples { found: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Koopman(#[from] KoopmanError),
    #[error(transparent)]
    Lifting(#[from] LiftingError),
}

/// One polytope of a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrsPiece {
    pub polytope: HPolytope,
    /// `None` for the target layer.
    pub model_id: Option<usize>,
    /// Piece of the previous layer this piece steers into.
    pub target_piece_id: Option<usize>,
    /// State region on which the piece's model is valid.
    pub subdomain_x: HPolytope,
}

/// Counters for one layer.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStats {
    pub pieces: usize,
    pub splits: usize,
    pub dropped_too_few_tuples: usize,
    pub dropped_split_cap: usize,
    pub dropped_other: usize,
    pub empty_pre: usize,
}

/// Layers `Z_0 .. Z_K` with the models that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrsResult {
    pub layers: Vec<Vec<BrsPiece>>,
    pub models: BTreeMap<usize, KoopmanModel>,
    pub lifting: Lifting,
    pub state_constraints: HPolytope,
    pub input_constraints: HPolytope,
    pub stats: Vec<LayerStats>,
}

impl BrsResult {
    pub fn horizon(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    /// Lowest-id piece of layer `k` containing `ψ(x)`.
    pub fn membership(&self, x: &DVector<f64>, k: usize) -> Option<usize> {
        let z = self.lifting.lift(x).ok()?;
        self.layers
            .get(k)?
            .iter()
            .position(|p| p.polytope.max_violation(&z) <= MEMBERSHIP_TOL)
    }

    /// Smallest layer in `1..=max_layer` containing `ψ(x)`, with the piece.
    pub fn first_layer_containing(&self, x: &DVector<f64>, max_layer: usize) -> Option<(usize, usize)> {
        (1..=max_layer.min(self.horizon()))
            .find_map(|k| self.membership(x, k).map(|piece| (k, piece)))
    }
}

/// Lifted one-step predecessor of `z` for `z⁺ = A z + B u + w`:
/// erode by `W`, pull back through `(A, B)`, intersect with `S_z × S_u` and
/// eliminate `u`.
pub fn pre_linear(
    model: &KoopmanModel,
    z: &HPolytope,
    s_z: &HPolytope,
    s_u: &HPolytope,
) -> Result<HPolytope, ReachError> {
    let (p, m) = (model.lifted_dim(), model.input_dim());
    for (expected, found) in [(p, z.dim()), (p, s_z.dim()), (m, s_u.dim())] {
        if expected != found {
            return Err(ReachError::DimensionMismatch { expected, found });
        }
    }
    let eroded = z.erode(&model.w)?;
    let mut map = DMatrix::zeros(p, p + m);
    map.columns_mut(0, p).copy_from(&model.a);
    map.columns_mut(p, m).copy_from(&model.b);
    let pulled = eroded.affine_preimage(&map, &DVector::zeros(p))?;
    let joint = pulled.intersect(&s_z.cartesian_product(s_u))?;
    if joint.is_empty()? {
        return Ok(HPolytope::empty(p));
    }
    let keep: Vec<usize> = (0..p).collect();
    let pre = joint.project(&keep)?;
    if pre.is_empty()? {
        return Ok(HPolytope::empty(p));
    }
    Ok(pre)
}

fn target_layer(
    lifting: &Lifting,
    x_target: &HPolytope,
    s_x: &HPolytope,
) -> Result<(HPolytope, BrsPiece), ReachError> {
    let s_z = lifting.implicit_set(s_x)?;
    let z0 = lifting.implicit_set(x_target)?.intersect(&s_z)?.remove_redundant()?;
    let piece = BrsPiece {
        polytope: z0,
        model_id: None,
        target_piece_id: None,
        subdomain_x: x_target.intersect(s_x)?.remove_redundant()?,
    };
    Ok((s_z, piece))
}

/// Recursive `Pre` with a single model on the whole domain. Stops early
/// (fewer layers) once a layer comes out empty.
pub fn brs_global(
    model: &KoopmanModel,
    x_target: &HPolytope,
    s_x: &HPolytope,
    s_u: &HPolytope,
    horizon: usize,
) -> Result<BrsResult, ReachError> {
    if horizon == 0 {
        return Err(ReachError::InvalidHorizon);
    }
    let lifting = &model.lifting;
    let (s_z, z0) = target_layer(lifting, x_target, s_x)?;
    let mut layers = vec![vec![z0]];
    let mut stats = vec![LayerStats { pieces: 1, ..Default::default() }];
    for k in 1..=horizon {
        let prev = &layers[k - 1][0].polytope;
        let pre = pre_linear(model, prev, &s_z, s_u)?;
        if pre.is_empty()? {
            warn!("layer {k} is empty; stopping");
            break;
        }
        debug!("layer {k}: {} rows", pre.num_rows());
        layers.push(vec![BrsPiece {
            polytope: pre,
            model_id: Some(0),
            target_piece_id: Some(0),
            subdomain_x: s_x.clone(),
        }]);
        stats.push(LayerStats { pieces: 1, ..Default::default() });
    }
    Ok(BrsResult {
        layers,
        models: BTreeMap::from([(0, model.clone())]),
        lifting: lifting.clone(),
        state_constraints: s_x.clone(),
        input_constraints: s_u.clone(),
        stats,
    })
}

/// `ψ(x⁺)` for every tuple, in dataset order.
pub fn lift_successors(ds: &Dataset, lifting: &Lifting) -> Result<Vec<DVector<f64>>, ReachError> {
    Ok((0..ds.len()).map(|k| lifting.lift(&ds.x_plus_vec(k))).collect::<Result<_, _>>()?)
}

/// Principal-axis box around the states whose lifted successor lies in
/// `piece`, clipped to `s_x`. `lifted_next` comes from [`lift_successors`].
pub fn select_subdomain(
    ds: &Dataset,
    lifted_next: &[DVector<f64>],
    piece: &HPolytope,
    s_x: &HPolytope,
) -> Result<HPolytope, ReachError> {
    if lifted_next.len() != ds.len() {
        return Err(ReachError::DimensionMismatch { expected: ds.len(), found: lifted_next.len() });
    }
    let points: Vec<DVector<f64>> = (0..ds.len())
        .filter(|&k| piece.max_violation(&lifted_next[k]) <= MEMBERSHIP_TOL)
        .map(|k| ds.x_vec(k))
        .collect();
    if points.len() < 2 {
        return Err(ReachError::TooFewTuples { found: points.len() });
    }
    let rbox = rotated_bounding_box(&points)?;
    Ok(rbox.polytope.intersect(s_x)?.remove_redundant()?)
}

/// Settings of the local-model pipeline.
#[derive(Debug, Clone, Copy)]
pub struct LocalBrsConfig<'a> {
    pub global: &'a GlobalFit,
    pub error_lipschitz: &'a [f64],
    pub lifting_lipschitz: f64,
    /// Dispersion of the data over `(x, u)`.
    pub dispersion: f64,
    /// Dispersion of the data over states.
    pub state_dispersion: f64,
    /// Split when the 1-norm of the local error radii exceeds this.
    pub split_threshold: f64,
    pub adapt_b: bool,
    pub max_splits: usize,
}

enum PieceOutcome {
    Recorded(Box<(BrsPiece, KoopmanModel)>),
    Split,
    TooFewTuples,
    SplitCap,
    EmptyPre,
    Failed,
}

struct Work {
    state_piece: HPolytope,
    lifted_piece: HPolytope,
    depth: usize,
}

/// Union of one-step sets of locally fitted models, one work queue per
/// piece of the previous layer. Pieces whose local error is too large are
/// halved through their Chebyshev center, up to `max_splits` times.
#[allow(clippy::too_many_arguments)]
pub fn brs_local(
    ds: &Dataset,
    lifting: &Lifting,
    cfg: &LocalBrsConfig<'_>,
    x_target: &HPolytope,
    s_x: &HPolytope,
    s_u: &HPolytope,
    horizon: usize,
) -> Result<BrsResult, ReachError> {
    if horizon == 0 {
        return Err(ReachError::InvalidHorizon);
    }
    if !(cfg.split_threshold > 0.0) {
        return Err(KoopmanError::InvalidParameter("split threshold must be positive".into()).into());
    }
    let n = lifting.state_dim();
    let state_coords: Vec<usize> = (0..n).collect();
    let (_, z0) = target_layer(lifting, x_target, s_x)?;
    let mut layers = vec![vec![z0]];
    let mut stats = vec![LayerStats { pieces: 1, ..Default::default() }];
    let mut models = BTreeMap::new();
    let lifted_next = lift_successors(ds, lifting)?;
    let lifted_next = lifted_next.as_slice();

    for k in 1..=horizon {
        let parents = &layers[k - 1];
        let per_parent: Vec<Result<(Vec<PieceOutcome>, usize), ReachError>> = parents
            .par_iter()
            .enumerate()
            .map(|(parent_id, parent)| {
                let state_piece = parent.polytope.project(&state_coords)?;
                let mut queue = vec![Work {
                    state_piece,
                    lifted_piece: parent.polytope.clone(),
                    depth: 0,
                }];
                let mut outcomes = Vec::new();
                let mut splits = 0;
                // Depth-first with the first half processed first keeps ids
                // stable.
                while let Some(work) = queue.pop() {
                    let outcome = process_piece(ds, lifted_next, lifting, cfg, s_x, s_u, k, parent_id, &work)?;
                    if let PieceOutcome::Split = outcome {
                        let (a, b) = work.state_piece.split_through_center()?;
                        splits += 1;
                        for half in [b, a] {
                            let lifted = work
                                .lifted_piece
                                .intersect(&lifting.implicit_set(&half)?)?
                                .remove_redundant()?;
                            if lifted.is_empty()? {
                                continue;
                            }
                            queue.push(Work { state_piece: half, lifted_piece: lifted, depth: work.depth + 1 });
                        }
                    } else {
                        outcomes.push(outcome);
                    }
                }
                Ok((outcomes, splits))
            })
            .collect();

        let mut layer = Vec::new();
        let mut st = LayerStats::default();
        for res in per_parent {
            let (outcomes, splits) = res?;
            st.splits += splits;
            for o in outcomes {
                match o {
                    PieceOutcome::Recorded(recorded) => {
                        let (mut piece, model) = *recorded;
                        let id = models.len();
                        models.insert(id, model);
                        piece.model_id = Some(id);
                        layer.push(piece);
                    }
                    PieceOutcome::TooFewTuples => st.dropped_too_few_tuples += 1,
                    PieceOutcome::SplitCap => st.dropped_split_cap += 1,
                    PieceOutcome::EmptyPre => st.empty_pre += 1,
                    PieceOutcome::Failed => st.dropped_other += 1,
                    PieceOutcome::Split => unreachable!("splits are expanded in the queue"),
                }
            }
        }
        st.pieces = layer.len();
        debug!("layer {k}: {st:?}");
        if layer.is_empty() {
            warn!("layer {k} is empty; stopping");
            break;
        }
        layers.push(layer);
        stats.push(st);
    }
    Ok(BrsResult {
        layers,
        models,
        lifting: lifting.clone(),
        state_constraints: s_x.clone(),
        input_constraints: s_u.clone(),
        stats,
    })
}

#[allow(clippy::too_many_arguments)]
fn process_piece(
    ds: &Dataset,
    lifted_next: &[DVector<f64>],
    lifting: &Lifting,
    cfg: &LocalBrsConfig<'_>,
    s_x: &HPolytope,
    s_u: &HPolytope,
    layer: usize,
    parent_id: usize,
    work: &Work,
) -> Result<PieceOutcome, ReachError> {
    let sub_x = match select_subdomain(ds, lifted_next, &work.lifted_piece, s_x) {
        Ok(s) => s,
        Err(ReachError::TooFewTuples { found }) => {
            warn!("layer {layer}, parent {parent_id}: {found} tuples map into piece; dropped");
            return Ok(PieceOutcome::TooFewTuples);
        }
        Err(e) => return Err(e),
    };
    if sub_x.is_empty()? {
        return Ok(PieceOutcome::TooFewTuples);
    }
    let region = sub_x.cartesian_product(s_u);
    let restricted = match restrict_dataset(ds, &region, cfg.dispersion) {
        Ok(d) => d,
        Err(KoopmanError::EmptyRestriction) => return Ok(PieceOutcome::TooFewTuples),
        Err(e) => return Err(e.into()),
    };
    let fit_cfg = LocalFitConfig {
        global_a: &cfg.global.a,
        global_b: &cfg.global.b,
        lifting_lipschitz: cfg.lifting_lipschitz,
        error_lipschitz: cfg.error_lipschitz,
        dispersion: cfg.dispersion,
        state_dispersion: cfg.state_dispersion,
        adapt_b: cfg.adapt_b,
    };
    let local = match fit_local(&restricted, lifting, &fit_cfg) {
        Ok(l) => l,
        Err(e) => {
            warn!("layer {layer}, parent {parent_id}: local fit failed ({e}); dropped");
            return Ok(PieceOutcome::Failed);
        }
    };
    let size = local.radii.iter().sum::<f64>();
    if size > cfg.split_threshold {
        return Ok(if work.depth < cfg.max_splits {
            PieceOutcome::Split
        } else {
            warn!("layer {layer}, parent {parent_id}: split cap reached (‖ε̄‖₁ = {size:.4}); dropped");
            PieceOutcome::SplitCap
        });
    }
    let model = local.into_model(
        lifting.clone(),
        region,
        Provenance::Local { layer, parent: parent_id },
    )?;
    let s_z = lifting.implicit_set(&sub_x)?;
    let pre = pre_linear(&model, &work.lifted_piece, &s_z, s_u)?;
    if pre.is_empty()? {
        return Ok(PieceOutcome::EmptyPre);
    }
    Ok(PieceOutcome::Recorded(Box::new((
        BrsPiece {
            polytope: pre,
            model_id: None,
            target_piece_id: Some(parent_id),
            subdomain_x: sub_x,
        },
        model,
    ))))
}
