use serde::{Deserialize, Serialize};

use super::{Gripper, Point3, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn flip(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            Direction::Forward => [1.0, 0.0],
            Direction::Backward => [0.0, 1.0],
        }
    }
}

/// Disk on the table that the task object must come to rest in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetRegion {
    pub center: [f64; 2],
    pub radius: f64,
}

impl TargetRegion {
    pub fn contains(&self, p: &Point3) -> bool {
        let (dx, dy) = (p.x - self.center[0], p.y - self.center[1]);
        (dx * dx + dy * dy).sqrt() <= self.radius
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResetDistribution {
    pub effector: Point3,
    /// Nominal (id, position) of every object; heights are replaced by the rest height.
    pub objects: Vec<(u32, Point3)>,
    pub perturbation_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub instruction: String,
    pub direction: Direction,
    /// Object that must be moved.
    pub object_id: u32,
    pub target: TargetRegion,
    /// Regions for the other named places on the table, used by prompting.
    pub source: TargetRegion,
    pub reset: ResetDistribution,
    pub horizon: usize,
}

impl TaskSpec {
    /// The object rests in the target region with the gripper open.
    pub fn is_success(&self, state: &WorldState) -> bool {
        state.gripper == Gripper::Open
            && state
                .object(self.object_id)
                .is_some_and(|o| !o.held && self.target.contains(&o.position))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinSide {
    Left,
    Right,
}

/// A forward task and the backward task that undoes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPair {
    pub forward: TaskSpec,
    pub backward: TaskSpec,
}

impl TaskPair {
    pub const PICK_SPOT: [f64; 2] = [2.5 / 6.0, 1.5 / 6.0];
    pub const LEFT_BIN: [f64; 2] = [1.5 / 6.0, 4.5 / 6.0];
    pub const RIGHT_BIN: [f64; 2] = [4.5 / 6.0, 4.5 / 6.0];
    pub const REGION_RADIUS: f64 = 0.08;
    pub const PERTURBATION_RADIUS: f64 = 0.15;
    pub const REST_HEIGHT: f64 = 0.15;
    pub const HORIZON: usize = 60;

    /// Bin sorting with one cube: forward puts it in the bin named by the
    /// instruction, backward returns it to the pick spot.
    pub fn bin_sort(side: BinSide) -> Self {
        let bin = match side {
            BinSide::Left => Self::LEFT_BIN,
            BinSide::Right => Self::RIGHT_BIN,
        };
        let side_name = match side {
            BinSide::Left => "left",
            BinSide::Right => "right",
        };
        let region = |c: [f64; 2]| TargetRegion {
            center: c,
            radius: Self::REGION_RADIUS,
        };
        let above = |c: [f64; 2]| Point3::new(c[0], c[1], Self::REST_HEIGHT);
        let on = |c: [f64; 2]| Point3::new(c[0], c[1], 0.0);
        let forward = TaskSpec {
            name: format!("bin_sort_{side_name}/forward"),
            instruction: format!("put the cube in the {side_name} bin"),
            direction: super::Direction::Forward,
            object_id: 0,
            target: region(bin),
            source: region(Self::PICK_SPOT),
            reset: ResetDistribution {
                effector: above(Self::PICK_SPOT),
                objects: vec![(0, on(Self::PICK_SPOT))],
                perturbation_radius: Self::PERTURBATION_RADIUS,
            },
            horizon: Self::HORIZON,
        };
        let backward = TaskSpec {
            name: format!("bin_sort_{side_name}/backward"),
            instruction: format!("take the cube out of the {side_name} bin and put it on the pick spot"),
            direction: super::Direction::Backward,
            object_id: 0,
            target: region(Self::PICK_SPOT),
            source: region(bin),
            reset: ResetDistribution {
                effector: above(bin),
                objects: vec![(0, on(bin))],
                perturbation_radius: Self::PERTURBATION_RADIUS,
            },
            horizon: Self::HORIZON,
        };
        Self { forward, backward }
    }

    pub fn task(&self, direction: Direction) -> &TaskSpec {
        match direction {
            Direction::Forward => &self.forward,
            Direction::Backward => &self.backward,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{reset, SimParams};

    #[test]
    fn tasks_are_mutual_resets() {
        let pair = TaskPair::bin_sort(BinSide::Left);
        let p = SimParams::default();
        // The backward reset state satisfies the forward success predicate and vice versa.
        assert!(pair.forward.is_success(&reset(&pair.backward, &p, 0, false)));
        assert!(pair.backward.is_success(&reset(&pair.forward, &p, 0, false)));
        assert!(!pair.forward.is_success(&reset(&pair.forward, &p, 0, false)));
    }

    #[test]
    fn right_bin_is_a_distinct_target() {
        let left = TaskPair::bin_sort(BinSide::Left);
        let right = TaskPair::bin_sort(BinSide::Right);
        let p = SimParams::default();
        assert!(!left.forward.is_success(&reset(&right.backward, &p, 0, false)));
    }
}
