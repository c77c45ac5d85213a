//! Open-loop waypoint executor.

use serde::{Deserialize, Serialize};

use super::train::{Env, EVAL_EPISODE_BASE};
use super::LearnError;
use crate::geometry::{block_to_pixel3, GridSpec, WaypointBlock};
use crate::sim::{rollout, Action, Episode, EpisodeKind, GripperCommand, Point3, Projection, TaskSpec, WorldState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MokaOutcome {
    pub success: bool,
    /// Some waypoint maps outside the workspace.
    pub unreachable: bool,
    pub episode: Option<Episode>,
}

/// Moves through the workspace points of each block centroid in order,
/// closes the gripper on reaching the first lowest-level block and opens it
/// at the final block. No feedback from object positions is used.
pub fn moka_executor(
    env: &Env,
    task: &TaskSpec,
    start: WorldState,
    blocks: &[WaypointBlock],
    grid: &GridSpec,
    proj: &Projection,
) -> Result<MokaOutcome, LearnError> {
    if blocks.is_empty() {
        return Err(LearnError::EmptySequence);
    }
    let mut targets: Vec<Point3> = Vec::with_capacity(blocks.len());
    for b in blocks {
        let p = proj
            .unproject(&block_to_pixel3(grid, *b)?)
            .ok_or(LearnError::NonInvertibleProjection)?;
        if p.iter().any(|c| !(-1e-9..=1.0 + 1e-9).contains(c)) {
            return Ok(MokaOutcome {
                success: false,
                unreachable: true,
                episode: None,
            });
        }
        targets.push(p);
    }
    let low = blocks.iter().map(|b| b.z).min().expect("non-empty");
    let last = blocks.len() - 1;
    let dm = env.sim.delta_max;
    let (mut idx, mut closed, mut finished) = (0usize, false, false);
    let ep = rollout(task, &env.sim, start, EVAL_EPISODE_BASE, EpisodeKind::Eval, |s| loop {
        if finished {
            return Action::noop();
        }
        let goal = targets[idx];
        if (goal - s.effector).norm() > 1e-9 {
            return Action::new(goal - s.effector, GripperCommand::None, dm);
        }
        if !closed && blocks[idx].z == low && idx < last {
            closed = true;
            idx += 1;
            return Action::new(Point3::zeros(), GripperCommand::Close, dm);
        }
        if idx == last {
            finished = true;
            return Action::new(Point3::zeros(), GripperCommand::Open, dm);
        }
        idx += 1;
    });
    Ok(MokaOutcome {
        success: ep.succeeded(),
        unreachable: false,
        episode: Some(ep),
    })
}
