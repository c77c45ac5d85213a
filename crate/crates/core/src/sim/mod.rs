//! Kinematic tabletop simulator.
//!
//! The workspace is the unit box with the table at `z = 0`. Objects rest with
//! their centers at [`SimParams::object_rest_z`]. There is no dynamics: the
//! effector moves by the clamped commanded displacement, a held object tracks
//! the effector exactly, and a released object drops straight down.

mod episode;
mod expert;
mod projection;
mod task;

pub use episode::{rollout, Episode, EpisodeKind, Frame};
pub use expert::{generate_failure, generate_failures, scripted_expert, ExpertAction, ExpertConfig, FailureMode};
pub use projection::{Projected, Projection};
pub use task::{BinSide, Direction, ResetDistribution, TargetRegion, TaskPair, TaskSpec};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Point3 = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// Largest per-axis displacement of one step.
    pub delta_max: f64,
    /// A close command grasps the nearest object within this 3D distance.
    pub grasp_radius: f64,
    /// Height of a resting object's center.
    pub object_rest_z: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            delta_max: 0.05,
            grasp_radius: 0.05,
            object_rest_z: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gripper {
    Open,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GripperCommand {
    Open,
    Close,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: u32,
    pub position: Point3,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub effector: Point3,
    pub gripper: Gripper,
    pub objects: Vec<ObjectState>,
    pub step_count: usize,
}

impl WorldState {
    pub fn object(&self, id: u32) -> Option<&ObjectState> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn held_count(&self) -> usize {
        self.objects.iter().filter(|o| o.held).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub delta: Point3,
    pub gripper: GripperCommand,
}

impl Action {
    pub fn new(delta: Point3, gripper: GripperCommand, delta_max: f64) -> Self {
        Self {
            delta: delta.map(|d| d.clamp(-delta_max, delta_max)),
            gripper,
        }
    }

    pub fn noop() -> Self {
        Self {
            delta: Point3::zeros(),
            gripper: GripperCommand::None,
        }
    }

    /// Decodes a normalized action in `[-1, 1]^4`: the first three
    /// components scale `delta_max`, the fourth commands the gripper
    /// by its sign (positive closes, negative opens, zero leaves it).
    pub fn from_normalized(a: &[f64], delta_max: f64) -> Self {
        let c = |v: f64| v.clamp(-1.0, 1.0);
        let gripper = if a[3] > 0.0 {
            GripperCommand::Close
        } else if a[3] < 0.0 {
            GripperCommand::Open
        } else {
            GripperCommand::None
        };
        Self {
            delta: Point3::new(c(a[0]), c(a[1]), c(a[2])) * delta_max,
            gripper,
        }
    }

    pub fn to_normalized(&self, delta_max: f64) -> [f64; 4] {
        let g = match self.gripper {
            GripperCommand::Close => 1.0,
            GripperCommand::Open => -1.0,
            GripperCommand::None => 0.0,
        };
        [
            self.delta.x / delta_max,
            self.delta.y / delta_max,
            self.delta.z / delta_max,
            g,
        ]
    }
}

pub const ACTION_DIM: usize = 4;

/// Initial state for `task`; with `perturb` every object is displaced
/// uniformly within the task's perturbation disk.
pub fn reset(task: &TaskSpec, params: &SimParams, seed: u64, perturb: bool) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = task.reset.perturbation_radius;
    let objects = task
        .reset
        .objects
        .iter()
        .map(|&(id, nominal)| {
            let mut position = nominal;
            position.z = params.object_rest_z;
            if perturb && radius > 0.0 {
                let r = radius * rng.random::<f64>().sqrt();
                let theta = rng.random::<f64>() * std::f64::consts::TAU;
                position.x = (position.x + r * theta.cos()).clamp(0.0, 1.0);
                position.y = (position.y + r * theta.sin()).clamp(0.0, 1.0);
            }
            ObjectState {
                id,
                position,
                held: false,
            }
        })
        .collect();
    WorldState {
        effector: task.reset.effector,
        gripper: Gripper::Open,
        objects,
        step_count: 0,
    }
}

/// One kinematic step. Returns the new state and whether the episode ended
/// (task success or horizon).
pub fn step(task: &TaskSpec, params: &SimParams, state: &WorldState, action: &Action) -> (WorldState, bool) {
    let mut next = state.clone();
    let delta = action.delta.map(|d| d.clamp(-params.delta_max, params.delta_max));
    next.effector = (state.effector + delta).map(|c| c.clamp(0.0, 1.0));
    next.step_count += 1;

    match action.gripper {
        GripperCommand::Close if state.gripper == Gripper::Open => {
            next.gripper = Gripper::Closed;
            let effector = next.effector;
            let nearest = next
                .objects
                .iter_mut()
                .map(|o| ((o.position - effector).norm(), o))
                .filter(|(d, _)| *d <= params.grasp_radius)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((_, obj)) = nearest {
                obj.held = true;
            }
        }
        GripperCommand::Open if state.gripper == Gripper::Closed => {
            next.gripper = Gripper::Open;
            for obj in next.objects.iter_mut().filter(|o| o.held) {
                obj.held = false;
                obj.position = Point3::new(next.effector.x, next.effector.y, params.object_rest_z);
            }
        }
        _ => {}
    }
    for obj in next.objects.iter_mut().filter(|o| o.held) {
        obj.position = next.effector;
    }
    let done = task.is_success(&next) || next.step_count >= task.horizon;
    (next, done)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn setup() -> (TaskPair, SimParams) {
        (TaskPair::bin_sort(BinSide::Left), SimParams::default())
    }

    #[test]
    fn reset_determinism_and_zero_radius() {
        let (pair, p) = setup();
        let a = reset(&pair.forward, &p, 3, false);
        assert_eq!(a, reset(&pair.forward, &p, 3, false));
        let mut zero = pair.forward.clone();
        zero.reset.perturbation_radius = 0.0;
        assert_eq!(reset(&zero, &p, 11, true), a);
    }

    #[test]
    fn perturbed_reset_within_radius() {
        let (pair, p) = setup();
        let r = pair.forward.reset.perturbation_radius;
        let nominal = reset(&pair.forward, &p, 0, false);
        let mut moved = 0;
        for seed in 0..500 {
            let s = reset(&pair.forward, &p, seed, true);
            for (o, n) in s.objects.iter().zip(&nominal.objects) {
                let d = (o.position - n.position).norm();
                assert!(d <= r + 1e-12);
                if d > 1e-9 {
                    moved += 1;
                }
            }
        }
        assert!(moved > 490);
    }

    #[test]
    fn grasp_and_carry() {
        let (pair, p) = setup();
        let mut s = reset(&pair.forward, &p, 0, false);
        let obj = s.objects[0].position;
        s.effector = obj;
        let (s, _) = step(
            &pair.forward,
            &p,
            &s,
            &Action::new(Point3::zeros(), GripperCommand::Close, p.delta_max),
        );
        assert!(s.objects[0].held);
        assert_eq!(s.objects[0].position, s.effector);
        let (s2, _) = step(
            &pair.forward,
            &p,
            &s,
            &Action::new(Point3::new(0.02, -0.01, 0.03), GripperCommand::None, p.delta_max),
        );
        assert_eq!(s2.objects[0].position, s2.effector);
        let (s3, _) = step(
            &pair.forward,
            &p,
            &s2,
            &Action::new(Point3::zeros(), GripperCommand::Open, p.delta_max),
        );
        assert!(!s3.objects[0].held);
        assert_eq!(s3.objects[0].position.z, p.object_rest_z);
        assert_eq!(s3.gripper, Gripper::Open);
    }

    #[test]
    fn close_far_from_object_grasps_nothing() {
        let (pair, p) = setup();
        let s = reset(&pair.forward, &p, 0, false);
        let far = Action {
            delta: Point3::zeros(),
            gripper: GripperCommand::Close,
        };
        let mut s = s;
        s.effector = Point3::new(0.9, 0.9, 0.9);
        let (s, _) = step(&pair.forward, &p, &s, &far);
        assert_eq!(s.gripper, Gripper::Closed);
        assert_eq!(s.held_count(), 0);
    }

    #[test]
    fn delta_clamped() {
        let (pair, p) = setup();
        let s = reset(&pair.forward, &p, 0, false);
        let a = Action {
            delta: Point3::new(1.0, -1.0, 0.01),
            gripper: GripperCommand::None,
        };
        let (n, _) = step(&pair.forward, &p, &s, &a);
        let d = n.effector - s.effector;
        assert!((d.x - 0.05).abs() < 1e-12);
        assert!((d.y + 0.05).abs() < 1e-12);
        assert!((d.z - 0.01).abs() < 1e-12);
    }

    #[test]
    fn normalized_action_round_trip() {
        let a = Action::new(Point3::new(0.05, -0.025, 0.0), GripperCommand::Close, 0.05);
        let n = a.to_normalized(0.05);
        assert_eq!(n, [1.0, -0.5, 0.0, 1.0]);
        assert_eq!(Action::from_normalized(&n, 0.05), a);
        assert_eq!(
            Action::from_normalized(&[0.0, 0.0, 0.0, 0.0], 0.05).gripper,
            GripperCommand::None
        );
        assert_eq!(
            Action::from_normalized(&[0.0, 0.0, 0.0, 0.2], 0.05).gripper,
            GripperCommand::Close
        );
        assert_eq!(
            Action::from_normalized(&[0.0, 0.0, 0.0, -0.7], 0.05).gripper,
            GripperCommand::Open
        );
    }

    #[test]
    fn horizon_ends_episode() {
        let (pair, p) = setup();
        let mut s = reset(&pair.forward, &p, 0, false);
        let mut done = false;
        for _ in 0..pair.forward.horizon {
            assert!(!done);
            (s, done) = step(&pair.forward, &p, &s, &Action::noop());
        }
        assert!(done);
    }

    fn arb_actions() -> impl Strategy<Value = Vec<[f64; 4]>> {
        proptest::collection::vec([-1.5f64..1.5, -1.5f64..1.5, -1.5f64..1.5, -1.0f64..1.0], 1..120)
    }

    proptest! {
        #[test]
        fn at_most_one_held_and_bit_exact(actions in arb_actions(), seed in 0u64..1000) {
            let (pair, p) = setup();
            let run = || {
                let mut s = reset(&pair.forward, &p, seed, true);
                let mut traj = vec![s.clone()];
                for a in &actions {
                    let act = Action::from_normalized(a, p.delta_max);
                    s = step(&pair.forward, &p, &s, &act).0;
                    traj.push(s.clone());
                }
                traj
            };
            let t1 = run();
            for s in &t1 {
                prop_assert!(s.held_count() <= 1);
                for o in s.objects.iter().filter(|o| o.held) {
                    prop_assert_eq!(o.position, s.effector);
                }
                prop_assert!(s.effector.iter().all(|c| (0.0..=1.0).contains(c)));
            }
            prop_assert_eq!(t1, run());
        }
    }
}
