//! Per-frame reward assignment.
//!
//! Robot pixels come from two RANSAC-fitted camera regressors (top-down for
//! `u, v`, side view for `w`). The dense reward is the shaped distance to the
//! block after the nearest one in the waypoint sequence; the sparse reward is
//! a consensus vote of a noisy success detector. A frame's combined reward is
//! 1 when the sparse reward fires and the dense reward otherwise.

mod kernel;
mod ransac;
mod sparse;

pub use kernel::{
    dense_reward, nearest_block, nearest_index, object_reward, shaped_reward, DenseReward, RewardParams, WaypointPath,
};
pub use ransac::{fit_ransac, AffineMap, CameraRegressor, MIN_SAMPLES};
pub use sparse::SparseClassifier;

use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{BlockSequence, GeometryError, PixelPoint3};
use crate::seed::mix;
use crate::sim::{Direction, Episode, Point3, Projection, TaskPair, WorldState};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RewardError {
    #[error("camera regressor is not fitted")]
    Unfitted,
    #[error("RANSAC needs at least {MIN_SAMPLES} pairs, got {0}")]
    TooFewPairs(usize),
    #[error("RANSAC found no consensus set of at least {MIN_SAMPLES} points (best {0})")]
    NoConsensus(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid reward parameters: {0}")]
    Params(String),
    #[error("no waypoint sequence for the {0:?} task")]
    MissingWaypoints(Direction),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formulation {
    DenseOnly,
    SparseOnly,
    Combined,
}

impl Formulation {
    pub const ALL: [Formulation; 3] = [Formulation::DenseOnly, Formulation::SparseOnly, Formulation::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            Formulation::DenseOnly => "dense_only",
            Formulation::SparseOnly => "sparse_only",
            Formulation::Combined => "combined",
        }
    }

    pub fn needs_dense(self) -> bool {
        self != Formulation::SparseOnly
    }

    /// The learner sees the success classifier's verdict.
    pub fn observes_success(self) -> bool {
        self != Formulation::DenseOnly
    }
}

impl FromStr for Formulation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dense_only" => Ok(Formulation::DenseOnly),
            "sparse_only" => Ok(Formulation::SparseOnly),
            "combined" => Ok(Formulation::Combined),
            other => Err(format!(
                "unknown formulation {other:?} (dense_only, sparse_only, combined)"
            )),
        }
    }
}

impl std::fmt::Display for Formulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The combination rule: a firing sparse reward overrides the dense one.
pub fn combine(r_sparse: u8, r_dense: f64) -> f64 {
    if r_sparse == 1 {
        1.0
    } else {
        r_dense
    }
}

/// How an object-tracking reward enters the dense reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectRewardMode {
    Disabled,
    /// Dense reward is the mean of the robot and object rewards.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrame {
    pub t: usize,
    pub robot_pixel: PixelPoint3,
    pub object_pixel: Option<PixelPoint3>,
    pub nearest_index: Option<usize>,
    pub target_index: Option<usize>,
    pub d_t: Option<f64>,
    pub r_dense: Option<f64>,
    pub r_obj: Option<f64>,
    pub r_sparse: u8,
    pub r: f64,
}

pub fn robot_pixel(
    top: &CameraRegressor,
    side: &CameraRegressor,
    effector: &Point3,
) -> Result<PixelPoint3, RewardError> {
    let uv = top.predict(effector)?;
    let sw = side.predict(effector)?;
    if uv.len() < 2 {
        return Err(RewardError::Dimension("top-down regressor must output (u, v)".into()));
    }
    let w = *sw
        .last()
        .ok_or_else(|| RewardError::Dimension("side regressor has no output".into()))?;
    Ok(PixelPoint3::new(uv[0], uv[1], w))
}

/// Samples effector poses, observes them through `proj` (with its pixel
/// noise plus a fraction of gross detection errors) and fits both regressors.
pub fn calibrate_cameras(
    proj: &Projection,
    samples: usize,
    outlier_fraction: f64,
    image_size: f64,
    seed: u64,
) -> Result<(CameraRegressor, CameraRegressor), RewardError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut top = Vec::with_capacity(samples);
    let mut side = Vec::with_capacity(samples);
    for i in 0..samples {
        let p = Point3::new(rng.random(), rng.random(), rng.random_range(0.0..0.6));
        let state = WorldState {
            effector: p,
            gripper: crate::sim::Gripper::Open,
            objects: Vec::new(),
            step_count: 0,
        };
        let obs = proj.project(&state, mix(seed, i as u64)).robot;
        let s = proj.side_horizontal(&p);
        if rng.random::<f64>() < outlier_fraction {
            top.push((
                p,
                vec![rng.random_range(0.0..image_size), rng.random_range(0.0..image_size)],
            ));
            side.push((p, vec![s, rng.random_range(0.0..image_size)]));
        } else {
            top.push((p, vec![obs.u, obs.v]));
            side.push((p, vec![s, obs.w]));
        }
    }
    let threshold = 3.0 * proj.noise_std.max(0.0) * std::f64::consts::SQRT_2 + 0.5;
    Ok((
        fit_ransac(&top, threshold, 300, mix(seed, 1 << 40))?,
        fit_ransac(&side, threshold, 300, mix(seed, 1 << 41))?,
    ))
}

/// Labels episodes for one task pair under a fixed set of waypoint
/// sequences, regressors and classifier.
#[derive(Debug)]
pub struct RewardEngine {
    pub params: RewardParams,
    pub top: CameraRegressor,
    pub side: CameraRegressor,
    pub classifier: SparseClassifier,
    pub projection: Projection,
    pub object_mode: ObjectRewardMode,
    forward: Option<WaypointPath>,
    backward: Option<WaypointPath>,
    tasks: TaskPair,
    dense_evaluations: AtomicU64,
}

impl RewardEngine {
    pub fn new(
        params: RewardParams,
        (top, side): (CameraRegressor, CameraRegressor),
        classifier: SparseClassifier,
        projection: Projection,
        tasks: TaskPair,
    ) -> Self {
        Self {
            params,
            top,
            side,
            classifier,
            projection,
            object_mode: ObjectRewardMode::Disabled,
            forward: None,
            backward: None,
            tasks,
            dense_evaluations: AtomicU64::new(0),
        }
    }

    pub fn with_waypoints(mut self, forward: BlockSequence, backward: BlockSequence) -> Result<Self, RewardError> {
        self.forward = Some(WaypointPath::new(forward, &self.params.grid)?);
        self.backward = Some(WaypointPath::new(backward, &self.params.grid)?);
        Ok(self)
    }

    pub fn waypoints(&self, direction: Direction) -> Option<&BlockSequence> {
        self.path(direction).map(|p| &p.sequence)
    }

    fn path(&self, direction: Direction) -> Option<&WaypointPath> {
        match direction {
            Direction::Forward => self.forward.as_ref(),
            Direction::Backward => self.backward.as_ref(),
        }
    }

    pub fn tasks(&self) -> &TaskPair {
        &self.tasks
    }

    /// Number of dense-reward kernel evaluations so far.
    pub fn dense_evaluations(&self) -> u64 {
        self.dense_evaluations.load(Ordering::Relaxed)
    }

    pub fn label_state(
        &self,
        direction: Direction,
        state: &WorldState,
        success: bool,
        episode: u64,
        t: usize,
        formulation: Formulation,
    ) -> Result<LabeledFrame, RewardError> {
        let robot = robot_pixel(&self.top, &self.side, &state.effector)?;
        let r_sparse = self.classifier.evaluate(success, episode, t as u64);
        let task = self.tasks.task(direction);
        let object_pixel = state.object(task.object_id).map(|o| {
            let noise_seed = mix(mix(self.classifier.seed ^ 0x000b_1ec7, episode), t as u64);
            let mut obs = state.clone();
            obs.objects.retain(|x| x.id == o.id);
            self.projection.project(&obs, noise_seed).objects[&o.id]
        });

        let mut frame = LabeledFrame {
            t,
            robot_pixel: robot,
            object_pixel,
            nearest_index: None,
            target_index: None,
            d_t: None,
            r_dense: None,
            r_obj: None,
            r_sparse,
            r: r_sparse as f64,
        };
        if formulation.needs_dense() {
            let path = self.path(direction).ok_or(RewardError::MissingWaypoints(direction))?;
            self.dense_evaluations.fetch_add(1, Ordering::Relaxed);
            let d = path.dense(&robot, self.params.lambda, self.params.phi);
            let mut r_dense = d.r_dense;
            if let (ObjectRewardMode::Mean, Some(op)) = (self.object_mode, object_pixel) {
                let r_obj = path.dense(&op, self.params.lambda, self.params.phi).r_dense;
                frame.r_obj = Some(r_obj);
                r_dense = 0.5 * (r_dense + r_obj);
            }
            frame.nearest_index = Some(d.nearest_index);
            frame.target_index = Some(d.target_index);
            frame.d_t = Some(d.distance);
            frame.r_dense = Some(r_dense);
            frame.r = match formulation {
                Formulation::Combined => combine(r_sparse, r_dense),
                _ => r_dense,
            };
        }
        Ok(frame)
    }

    /// Labels every frame independently.
    pub fn label_episode(&self, episode: &Episode, formulation: Formulation) -> Result<Vec<LabeledFrame>, RewardError> {
        episode
            .frames
            .iter()
            .map(|f| self.label_state(episode.direction, &f.state, f.success, episode.id, f.t, formulation))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{block_to_pixel3, GridSpec, WaypointBlock};
    use crate::sim::{reset, rollout, scripted_expert, BinSide, EpisodeKind, ExpertConfig, SimParams};

    fn grid() -> GridSpec {
        GridSpec::with_image(100, 100).unwrap()
    }

    fn identity_regressors() -> (CameraRegressor, CameraRegressor) {
        let top = AffineMap {
            rows: vec![[100.0, 0.0, 0.0, 0.0], [0.0, 100.0, 0.0, 0.0]],
        };
        let side = AffineMap {
            rows: vec![[100.0, 0.0, 0.0, 0.0], [0.0, 0.0, 100.0, 0.0]],
        };
        (
            CameraRegressor::from_map(top, 1.0),
            CameraRegressor::from_map(side, 1.0),
        )
    }

    fn seq(b: &[(usize, usize, usize)]) -> BlockSequence {
        BlockSequence::new(b.iter().map(|&(x, y, z)| WaypointBlock::new(x, y, z)).collect()).unwrap()
    }

    fn engine(classifier: SparseClassifier) -> RewardEngine {
        let fwd = seq(&[
            (2, 1, 0),
            (2, 1, 2),
            (2, 2, 2),
            (1, 2, 2),
            (1, 3, 2),
            (1, 4, 2),
            (1, 4, 0),
        ]);
        let bwd = seq(&[
            (1, 4, 0),
            (1, 4, 2),
            (1, 3, 2),
            (1, 2, 2),
            (2, 2, 2),
            (2, 1, 2),
            (2, 1, 0),
        ]);
        RewardEngine::new(
            RewardParams::simulation(grid()),
            identity_regressors(),
            classifier,
            Projection::scaled(100.0, 0.0),
            TaskPair::bin_sort(BinSide::Left),
        )
        .with_waypoints(fwd, bwd)
        .unwrap()
    }

    fn expert_episode(id: u64) -> Episode {
        let pair = TaskPair::bin_sort(BinSide::Left);
        let p = SimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(id);
        let cfg = ExpertConfig {
            noise: 0.2,
            ..Default::default()
        };
        rollout(
            &pair.forward,
            &p,
            reset(&pair.forward, &p, id, true),
            id,
            EpisodeKind::Demo,
            |s| scripted_expert(&pair.forward, &p, &cfg, s, &mut rng).action,
        )
    }

    #[test]
    fn robot_pixel_examples() {
        let ident = (
            CameraRegressor::from_map(
                AffineMap {
                    rows: vec![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]],
                },
                1.0,
            ),
            CameraRegressor::from_map(
                AffineMap {
                    rows: vec![[0.0, 0.0, 1.0, 0.0]],
                },
                1.0,
            ),
        );
        let p = robot_pixel(&ident.0, &ident.1, &Point3::new(50.0, 60.0, 10.0)).unwrap();
        assert_eq!(p, PixelPoint3::new(50.0, 60.0, 10.0));
        let planted = CameraRegressor::from_map(
            AffineMap {
                rows: vec![[2.0, 0.0, 0.0, 3.0], [0.0, 4.0, 0.0, -1.0]],
            },
            1.0,
        );
        let p = robot_pixel(&planted, &ident.1, &Point3::new(1.0, 1.0, 7.0)).unwrap();
        assert_eq!((p.u, p.v), (5.0, 3.0));
        assert_eq!(
            robot_pixel(&CameraRegressor::unfitted(1.0), &ident.1, &Point3::zeros()),
            Err(RewardError::Unfitted)
        );
    }

    #[test]
    fn combination_rule() {
        for r_dense in [0.0, 0.3, 0.999] {
            assert_eq!(combine(1, r_dense), 1.0);
            assert_eq!(combine(0, r_dense), r_dense);
        }
    }

    #[test]
    fn all_success_frames_label_one() {
        let e = engine(SparseClassifier::noiseless(0));
        let mut ep = expert_episode(3);
        for f in ep.frames.iter_mut() {
            f.success = true;
        }
        for l in e.label_episode(&ep, Formulation::Combined).unwrap() {
            assert_eq!(l.r, 1.0);
            assert_eq!(l.r_sparse, 1);
        }
    }

    #[test]
    fn last_block_frame_without_success() {
        let e = engine(SparseClassifier::noiseless(0));
        let last = block_to_pixel3(&grid(), WaypointBlock::new(1, 4, 0)).unwrap();
        let mut state = reset(&e.tasks().forward, &SimParams::default(), 0, false);
        state.effector = Point3::new(last.u / 100.0, last.v / 100.0, last.w / 100.0);
        let l = e
            .label_state(Direction::Forward, &state, false, 0, 0, Formulation::Combined)
            .unwrap();
        assert_eq!((l.nearest_index, l.target_index), (Some(6), Some(6)));
        let expect = 0.5 * (1.0 - (-0.1f64 * 15.0).tanh());
        assert!((l.r - expect).abs() < 1e-12);
    }

    #[test]
    fn labels_are_per_frame() {
        let e = engine(SparseClassifier::new(4, 0.3, 0.3, 2).unwrap());
        let ep = expert_episode(5);
        let labels = e.label_episode(&ep, Formulation::Combined).unwrap();
        let mut shuffled = ep.clone();
        shuffled.frames.reverse();
        let mut rev = e.label_episode(&shuffled, Formulation::Combined).unwrap();
        rev.reverse();
        assert_eq!(labels, rev);
    }

    #[test]
    fn sparse_only_skips_dense() {
        let e = engine(SparseClassifier::noiseless(0));
        let ep = expert_episode(1);
        let labels = e.label_episode(&ep, Formulation::SparseOnly).unwrap();
        assert_eq!(e.dense_evaluations(), 0);
        assert!(labels.iter().all(|l| l.r_dense.is_none() && (l.r == 0.0 || l.r == 1.0)));
        assert_eq!(labels.last().unwrap().r, 1.0);
        e.label_episode(&ep, Formulation::DenseOnly).unwrap();
        assert_eq!(e.dense_evaluations(), ep.frames.len() as u64);
    }

    #[test]
    fn failure_labels_in_open_interval() {
        let e = engine(SparseClassifier::noiseless(0));
        let pair = TaskPair::bin_sort(BinSide::Left);
        let fail = crate::sim::generate_failure(
            &pair.forward,
            &SimParams::default(),
            &ExpertConfig::default(),
            4,
            9,
            crate::sim::FailureMode::RandomPolicy,
        );
        for l in e.label_episode(&fail, Formulation::Combined).unwrap() {
            assert!(l.r > 0.0 && l.r < 1.0);
        }
    }

    #[test]
    fn missing_waypoints() {
        let e = RewardEngine::new(
            RewardParams::simulation(grid()),
            identity_regressors(),
            SparseClassifier::noiseless(0),
            Projection::scaled(100.0, 0.0),
            TaskPair::bin_sort(BinSide::Left),
        );
        let ep = expert_episode(0);
        assert_eq!(
            e.label_episode(&ep, Formulation::Combined),
            Err(RewardError::MissingWaypoints(Direction::Forward))
        );
        assert!(e.label_episode(&ep, Formulation::SparseOnly).is_ok());
    }

    #[test]
    fn object_reward_mode() {
        let mut e = engine(SparseClassifier::noiseless(0));
        let ep = expert_episode(2);
        let off = e.label_episode(&ep, Formulation::DenseOnly).unwrap();
        assert!(off.iter().all(|l| l.r_obj.is_none()));
        e.object_mode = ObjectRewardMode::Mean;
        let on = e.label_episode(&ep, Formulation::DenseOnly).unwrap();
        for (a, b) in off.iter().zip(&on) {
            let r_obj = b.r_obj.unwrap();
            assert!((b.r - 0.5 * (a.r + r_obj)).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_recovers_projection() {
        let proj = Projection::scaled(100.0, 1.0);
        let (top, side) = calibrate_cameras(&proj, 200, 0.2, 100.0, 4).unwrap();
        let p = Point3::new(0.3, 0.6, 0.2);
        let px = robot_pixel(&top, &side, &p).unwrap();
        assert!(px.distance(&proj.point(&p)) < 0.5, "{px:?}");
    }
}
