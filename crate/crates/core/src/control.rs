//! Controller extraction from implicit backward reachable sets.

use std::io::Write;

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::koopman::KoopmanModel;
use crate::lifting::LiftingError;
use crate::polytope::{HPolytope, PolytopeError, MEMBERSHIP_TOL};
use crate::reach::BrsResult;

/// Offset relaxation used when a boundary state's admissible set is empty
/// only because of LP round-off.
pub const ADMISSIBLE_SLACK: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("state is not in layer {layer} of the reachable set")]
    NotInBrs { layer: usize },
    #[error("state is already in the target layer")]
    AtTarget,
    #[error("empty admissible input set at layer {layer}, piece {piece}")]
    EmptyAdmissible { layer: usize, piece: usize },
    #[error("guarantee violated after step {step}: successor not in layer {layer}")]
    GuaranteeViolation { step: usize, layer: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("corrupt input: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Lifting(#[from] LiftingError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// `{u ∈ S_u | (Aψ(x) + Bu) ⊕ W ⊆ Z}`.
pub fn admissible_input_set(
    model: &KoopmanModel,
    x: &DVector<f64>,
    z_target: &HPolytope,
    s_u: &HPolytope,
) -> Result<HPolytope, ControlError> {
    admissible_with_slack(model, x, z_target, s_u, 0.0)
}

fn admissible_with_slack(
    model: &KoopmanModel,
    x: &DVector<f64>,
    z_target: &HPolytope,
    s_u: &HPolytope,
    slack: f64,
) -> Result<HPolytope, ControlError> {
    if s_u.dim() != model.input_dim() {
        return Err(ControlError::DimensionMismatch { expected: model.input_dim(), found: s_u.dim() });
    }
    let z = model.lifting.lift(x)?;
    let eroded = z_target.erode(&model.w)?;
    let h = eroded.normals();
    let rhs = eroded.offsets() - h * (&model.a * z) + DVector::from_element(eroded.num_rows(), slack);
    let set = HPolytope::new(h * &model.b, rhs)?;
    Ok(set.intersect(s_u)?)
}

/// Chebyshev center of the admissible set of the piece of layer `k`
/// containing `x`, taken with respect to the piece it steers into.
pub fn extract_input(
    r: &BrsResult,
    x: &DVector<f64>,
    k: usize,
) -> Result<(DVector<f64>, usize), ControlError> {
    if k == 0 {
        return Err(ControlError::AtTarget);
    }
    let piece_id = r.membership(x, k).ok_or(ControlError::NotInBrs { layer: k })?;
    let piece = &r.layers[k][piece_id];
    let corrupt = |what: &str| ControlError::Corrupt(format!("layer {k}, piece {piece_id}: {what}"));
    let model = piece
        .model_id
        .and_then(|id| r.models.get(&id))
        .ok_or_else(|| corrupt("missing model"))?;
    let target = piece
        .target_piece_id
        .and_then(|id| r.layers[k - 1].get(id))
        .ok_or_else(|| corrupt("missing target piece"))?;
    let empty = ControlError::EmptyAdmissible { layer: k, piece: piece_id };
    let set = admissible_input_set(model, x, &target.polytope, &r.input_constraints)?;
    let set = if set.is_empty()? {
        // States on the piece boundary can lose their admissible inputs to
        // round-off; accept them with a tiny relaxation.
        let relaxed = admissible_with_slack(model, x, &target.polytope, &r.input_constraints, ADMISSIBLE_SLACK)?;
        if relaxed.is_empty()? {
            return Err(empty);
        }
        warn!("layer {k}, piece {piece_id}: admissible set empty without relaxation");
        relaxed
    } else {
        set
    };
    let (u, _) = set.chebyshev_center().map_err(|e| match e {
        PolytopeError::EmptyPolytope => empty,
        e => e.into(),
    })?;
    Ok((u, piece_id))
}

/// A closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    /// Layer of the reachable set the state was in before each step.
    pub layers: Vec<usize>,
    pub input_dim: usize,
    pub reached: bool,
    pub steps_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub reached: bool,
    pub steps_used: usize,
}

impl Trajectory {
    pub fn summary(&self) -> TrajectorySummary {
        TrajectorySummary { reached: self.reached, steps_used: self.steps_used }
    }

    /// `step,x1..xn,u1..um`; the input cells of the final row are empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ControlError> {
        let n = self.states.first().map_or(0, |x| x.len());
        let m = self.input_dim;
        let mut wr = csv::Writer::from_writer(w);
        let header: Vec<String> = std::iter::once("step".to_string())
            .chain((1..=n).map(|i| format!("x{i}")))
            .chain((1..=m).map(|i| format!("u{i}")))
            .collect();
        wr.write_record(&header)?;
        for (k, x) in self.states.iter().enumerate() {
            let mut rec = vec![k.to_string()];
            rec.extend(x.iter().map(|v| format!("{v:?}")));
            match self.inputs.get(k) {
                Some(u) => rec.extend(u.iter().map(|v| format!("{v:?}"))),
                None => rec.extend(std::iter::repeat_n(String::new(), m)),
            }
            wr.write_record(&rec)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Inverse of [`Trajectory::write_csv`]; `reached` and `steps_used`
    /// come from the summary. Layer indices are not stored and come back
    /// empty.
    pub fn read_csv<R: std::io::Read>(r: R, summary: TrajectorySummary) -> Result<Self, ControlError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let n = header.iter().filter(|h| h.starts_with('x')).count();
        let m = header.iter().filter(|h| h.starts_with('u')).count();
        if header.get(0) != Some("step") || 1 + n + m != header.len() {
            return Err(ControlError::Corrupt(format!("trajectory header {header:?}")));
        }
        let mut states = Vec::new();
        let mut inputs = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |s: &str| s.parse::<f64>().map_err(|_| ControlError::Corrupt(format!("bad value `{s}`")));
            let x = (1..=n).map(|j| parse(&rec[j])).collect::<Result<Vec<_>, _>>()?;
            states.push(DVector::from_vec(x));
            if m > 0 && !rec[1 + n].is_empty() {
                let u = (1 + n..1 + n + m).map(|j| parse(&rec[j])).collect::<Result<Vec<_>, _>>()?;
                inputs.push(DVector::from_vec(u));
            }
        }
        if states.is_empty() || inputs.len() + 1 != states.len() {
            return Err(ControlError::Corrupt("inconsistent trajectory lengths".into()));
        }
        Ok(Trajectory {
            states,
            inputs,
            layers: Vec::new(),
            input_dim: m,
            reached: summary.reached,
            steps_used: summary.steps_used,
        })
    }
}

/// Runs the extracted controller on the true dynamics `step`.
///
/// Before each step the state is placed in the smallest layer that contains
/// it, so the run ends as soon as the target is entered. After a step from
/// layer `j` the successor must lie in layer `j - 1`; otherwise the model
/// behind the set was unsound and [`ControlError::GuaranteeViolation`] is
/// returned.
pub fn simulate_closed_loop<F>(
    step: F,
    r: &BrsResult,
    x0: &DVector<f64>,
    x_target: &HPolytope,
) -> Result<Trajectory, ControlError>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let n = r.lifting.state_dim();
    if x0.len() != n {
        return Err(ControlError::DimensionMismatch { expected: n, found: x0.len() });
    }
    let in_target = |x: &DVector<f64>| x_target.max_violation(x) <= MEMBERSHIP_TOL;
    let mut traj = Trajectory {
        states: vec![x0.clone()],
        inputs: Vec::new(),
        layers: Vec::new(),
        input_dim: r.input_constraints.dim(),
        reached: false,
        steps_used: 0,
    };
    if in_target(x0) {
        traj.reached = true;
        return Ok(traj);
    }
    let horizon = r.horizon();
    let (mut layer, _) = r
        .first_layer_containing(x0, horizon)
        .ok_or(ControlError::NotInBrs { layer: horizon })?;
    let mut x = x0.clone();
    loop {
        let (u, _) = extract_input(r, &x, layer)?;
        let next = step(&x, &u);
        traj.layers.push(layer);
        traj.inputs.push(u);
        traj.states.push(next.clone());
        traj.steps_used += 1;
        x = next;
        if in_target(&x) {
            traj.reached = true;
            return Ok(traj);
        }
        let violation = ControlError::GuaranteeViolation { step: traj.steps_used, layer: layer - 1 };
        if layer == 1 || r.membership(&x, layer - 1).is_none() {
            return Err(violation);
        }
        layer = r.first_layer_containing(&x, layer - 1).ok_or(violation)?.0;
    }
}

/// Box vertices of `W` pushed through the one-step prediction; used to
/// check the one-step guarantee directly.
pub fn worst_case_successors(
    model: &KoopmanModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<Vec<DVector<f64>>, ControlError> {
    let nominal = &model.a * model.lifting.lift(x)? + &model.b * u;
    Ok(model.w.vertices().into_iter().map(|w| &nominal + w).collect())
}
