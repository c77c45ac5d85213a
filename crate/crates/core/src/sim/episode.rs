use serde::{Deserialize, Serialize};

use super::{step, Action, Direction, SimParams, TaskSpec, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpisodeKind {
    Demo,
    Failure,
    Online,
    Eval,
}

/// State at time `t` and the action taken from it (`None` on the last frame).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: usize,
    pub state: WorldState,
    pub action: Option<Action>,
    /// Ground-truth task success at this frame.
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub direction: Direction,
    pub kind: EpisodeKind,
    pub frames: Vec<Frame>,
}

impl Episode {
    pub fn succeeded(&self) -> bool {
        self.frames.last().is_some_and(|f| f.success)
    }

    pub fn final_state(&self) -> &WorldState {
        &self.frames.last().expect("episodes have at least one frame").state
    }

    pub fn num_steps(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }
}

/// Runs `policy` from `start` until success or the task horizon. The step
/// counter restarts at zero so chained (reset-free) episodes each get a full
/// horizon.
pub fn rollout<P>(
    task: &TaskSpec,
    params: &SimParams,
    start: WorldState,
    id: u64,
    kind: EpisodeKind,
    mut policy: P,
) -> Episode
where
    P: FnMut(&WorldState) -> Action,
{
    let mut state = start;
    state.step_count = 0;
    let mut frames = Vec::with_capacity(task.horizon + 1);
    let mut done = task.is_success(&state);
    while !done {
        let action = policy(&state);
        let (next, end) = step(task, params, &state, &action);
        frames.push(Frame {
            t: frames.len(),
            success: task.is_success(&state),
            state,
            action: Some(action),
        });
        state = next;
        done = end;
    }
    frames.push(Frame {
        t: frames.len(),
        success: task.is_success(&state),
        state,
        action: None,
    });
    Episode {
        id,
        direction: task.direction,
        kind,
        frames,
    }
}
