use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    reset, rollout, Action, Episode, EpisodeKind, Gripper, GripperCommand, Point3, SimParams, TaskSpec, WorldState,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Height the object is carried at.
    pub carry_height: f64,
    /// Minimum height for horizontal approach moves.
    pub approach_height: f64,
    /// Position tolerance for phase switches.
    pub tolerance: f64,
    /// Rise of the approach funnel per unit of horizontal distance.
    pub funnel_slope: f64,
    /// Distance at which the gripper closes on the object or releases it.
    pub grasp_tolerance: f64,
    /// Height below which a carried object is released over the target.
    pub release_height: f64,
    /// Gaussian displacement noise as a fraction of `delta_max`.
    pub noise: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            carry_height: 0.25,
            approach_height: 0.15,
            tolerance: 0.01,
            funnel_slope: 1.0,
            grasp_tolerance: 0.03,
            release_height: 0.12,
            noise: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertAction {
    pub action: Action,
    /// The expert cannot solve the task from this state.
    pub failed: bool,
}

/// Greedy proportional pick-and-place controller.
pub fn scripted_expert<R: Rng>(
    task: &TaskSpec,
    params: &SimParams,
    cfg: &ExpertConfig,
    state: &WorldState,
    rng: &mut R,
) -> ExpertAction {
    let noop = ExpertAction {
        action: Action::noop(),
        failed: false,
    };
    if task.is_success(state) {
        return noop;
    }
    let [tx, ty] = task.target.center;
    let reachable = (0.0..=1.0).contains(&tx) && (0.0..=1.0).contains(&ty);
    let Some(obj) = state.object(task.object_id).filter(|_| reachable) else {
        return ExpertAction { failed: true, ..noop };
    };
    let eff = state.effector;
    let xy_dist = |x: f64, y: f64| ((eff.x - x).powi(2) + (eff.y - y).powi(2)).sqrt();
    let band = 2.5 * cfg.tolerance;
    let rest = params.object_rest_z;
    // Goals sit on a funnel above the destination whose height grows with
    // horizontal distance, so the commanded motion varies smoothly with state.
    let funnel =
        |x: f64, y: f64, base: f64, cap: f64| Point3::new(x, y, base + (cfg.funnel_slope * xy_dist(x, y)).min(cap));

    let (goal, gripper, precise) = if obj.held {
        // Release while still descending: the object drops to the table,
        // and the command does not hinge on reaching an exact point.
        let place = Point3::new(tx, ty, rest);
        let low = eff.z <= cfg.release_height || (eff - place).norm() <= cfg.grasp_tolerance;
        if xy_dist(tx, ty) <= band && low {
            (place, GripperCommand::Open, true)
        } else {
            (
                funnel(tx, ty, rest, cfg.carry_height - rest),
                GripperCommand::Close,
                false,
            )
        }
    } else if state.gripper == Gripper::Closed {
        (eff, GripperCommand::Open, true)
    } else {
        let o = obj.position;
        if (eff - o).norm() <= cfg.grasp_tolerance {
            (o, GripperCommand::Close, true)
        } else {
            (
                funnel(o.x, o.y, o.z, cfg.approach_height - rest),
                GripperCommand::Open,
                false,
            )
        }
    };

    let mut delta = goal - eff;
    if cfg.noise > 0.0 && !precise {
        // Noise shrinks near the goal so phase tolerances are still reached.
        let scale = delta.norm().min(params.delta_max);
        let n = Normal::new(0.0, cfg.noise * scale).expect("finite noise");
        delta += Point3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    }
    ExpertAction {
        action: Action::new(delta, gripper, params.delta_max),
        failed: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Uniformly random normalized actions.
    RandomPolicy,
    /// The expert, frozen in place right before it would release the object.
    TruncatedExpert,
}

/// A rollout from a perturbed reset that never satisfies the task predicate.
/// Random rollouts that happen to succeed are resampled from a derived seed.
pub fn generate_failure(
    task: &TaskSpec,
    params: &SimParams,
    cfg: &ExpertConfig,
    seed: u64,
    id: u64,
    mode: FailureMode,
) -> Episode {
    for attempt in 0u64.. {
        let s = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let start = reset(task, params, s, true);
        let ep = match mode {
            FailureMode::RandomPolicy => rollout(task, params, start, id, EpisodeKind::Failure, |_| {
                let a: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
                Action::from_normalized(&a, params.delta_max)
            }),
            FailureMode::TruncatedExpert => rollout(task, params, start, id, EpisodeKind::Failure, |st| {
                let a = scripted_expert(task, params, cfg, st, &mut rng).action;
                if a.gripper == GripperCommand::Open && st.gripper == Gripper::Closed {
                    Action::noop()
                } else {
                    a
                }
            }),
        };
        if ep.frames.iter().all(|f| !f.success) {
            return ep;
        }
    }
    unreachable!("attempt counter is unbounded")
}

/// `count` failures alternating between random and truncated-expert rollouts.
pub fn generate_failures(
    task: &TaskSpec,
    params: &SimParams,
    cfg: &ExpertConfig,
    count: usize,
    seed: u64,
    first_id: u64,
) -> Vec<Episode> {
    (0..count)
        .map(|i| {
            let mode = if i % 2 == 0 {
                FailureMode::TruncatedExpert
            } else {
                FailureMode::RandomPolicy
            };
            generate_failure(
                task,
                params,
                cfg,
                seed.wrapping_add(i as u64 * 7919),
                first_id + i as u64,
                mode,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{BinSide, Direction, TaskPair};

    fn expert_episode(task: &TaskSpec, start: WorldState, noise: f64, seed: u64) -> Episode {
        let p = SimParams::default();
        let cfg = ExpertConfig {
            noise,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rollout(task, &p, start, 0, EpisodeKind::Demo, |s| {
            scripted_expert(task, &p, &cfg, s, &mut rng).action
        })
    }

    #[test]
    fn expert_solves_both_directions() {
        let p = SimParams::default();
        for side in [BinSide::Left, BinSide::Right] {
            let pair = TaskPair::bin_sort(side);
            for dir in [Direction::Forward, Direction::Backward] {
                let task = pair.task(dir);
                for seed in 0..30 {
                    let ep = expert_episode(task, reset(task, &p, seed, seed > 0), 0.3, seed);
                    assert!(ep.succeeded(), "{} seed {seed}", task.name);
                    assert!(ep.num_steps() <= 50, "{} took {}", task.name, ep.num_steps());
                }
            }
        }
    }

    #[test]
    fn noiseless_expert_deterministic() {
        let pair = TaskPair::bin_sort(BinSide::Left);
        let p = SimParams::default();
        let a = expert_episode(&pair.forward, reset(&pair.forward, &p, 4, true), 0.0, 1);
        let b = expert_episode(&pair.forward, reset(&pair.forward, &p, 4, true), 0.0, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn noop_on_success() {
        let pair = TaskPair::bin_sort(BinSide::Left);
        let p = SimParams::default();
        let done = reset(&pair.backward, &p, 0, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = scripted_expert(&pair.forward, &p, &ExpertConfig::default(), &done, &mut rng);
        assert_eq!(a.action, Action::noop());
        assert!(!a.failed);
    }

    #[test]
    fn unreachable_target_flags_failure() {
        let mut task = TaskPair::bin_sort(BinSide::Left).forward;
        task.target.center = [1.5, 0.5];
        let p = SimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = scripted_expert(
            &task,
            &p,
            &ExpertConfig::default(),
            &reset(&task, &p, 0, false),
            &mut rng,
        );
        assert!(a.failed);
        assert_eq!(a.action, Action::noop());
    }

    #[test]
    fn reset_free_closure() {
        let pair = TaskPair::bin_sort(BinSide::Left);
        let p = SimParams::default();
        let nominal = reset(&pair.forward, &p, 0, false);
        for seed in 0..20 {
            let fwd = expert_episode(&pair.forward, reset(&pair.forward, &p, seed, true), 0.2, seed);
            assert!(fwd.succeeded());
            let back = expert_episode(&pair.backward, fwd.final_state().clone(), 0.2, seed + 100);
            assert!(back.succeeded());
            for (o, n) in back.final_state().objects.iter().zip(&nominal.objects) {
                assert!((o.position - n.position).norm() <= pair.forward.reset.perturbation_radius);
            }
        }
    }

    #[test]
    fn failures_never_succeed() {
        let pair = TaskPair::bin_sort(BinSide::Left);
        let p = SimParams::default();
        let cfg = ExpertConfig::default();
        for mode in [FailureMode::RandomPolicy, FailureMode::TruncatedExpert] {
            for seed in 0..10 {
                let ep = generate_failure(&pair.forward, &p, &cfg, seed, 0, mode);
                assert!(ep.frames.iter().all(|f| !f.success));
                assert_eq!(ep.num_steps(), pair.forward.horizon);
                assert_eq!(ep.kind, EpisodeKind::Failure);
            }
        }
        let truncated = generate_failure(&pair.forward, &p, &cfg, 3, 0, FailureMode::TruncatedExpert);
        assert!(truncated.final_state().objects[0].held);
        assert_eq!(generate_failures(&pair.forward, &p, &cfg, 4, 9, 0).len(), 4);
    }
}
