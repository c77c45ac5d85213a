use crate::sim::{Gripper, TaskSpec, WorldState};

pub const OBS_DIM: usize = 12;

/// Scale applied to the object-minus-effector offset so that grasp-scale
/// distances are visible next to workspace-scale positions.
pub const OFFSET_SCALE: f64 = 4.0;

/// Effector position, gripper bit, task-object position, scaled
/// object-minus-effector offset and the task one-hot.
pub fn observe(state: &WorldState, task: &TaskSpec) -> [f64; OBS_DIM] {
    let e = state.effector;
    let o = state.object(task.object_id).map_or(e, |o| o.position);
    let d = (o - e) * OFFSET_SCALE;
    let g = if state.gripper == Gripper::Closed { 1.0 } else { 0.0 };
    let [f, b] = task.direction.one_hot();
    [e.x, e.y, e.z, g, o.x, o.y, o.z, d.x, d.y, d.z, f, b]
}
