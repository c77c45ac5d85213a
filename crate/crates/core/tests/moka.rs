use waypoint_rl::geometry::BlockSequence;
use waypoint_rl::geometry::WaypointBlock;
use waypoint_rl::harness::{acquire_waypoints, prepare, ExperimentConfig, Prepared};
use waypoint_rl::learn::{moka_executor, LearnError};
use waypoint_rl::seed::mix;
use waypoint_rl::sim::{reset, Projection};

const TRIALS: usize = 20;
const MIN_DROP: f64 = 0.3;

fn setup() -> (Prepared, BlockSequence) {
    let cfg = ExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let waypoints = acquire_waypoints(&cfg, dir.path()).unwrap();
    (prepare(&cfg, 0, &waypoints).unwrap(), waypoints.0)
}

fn rate(prep: &Prepared, seq: &BlockSequence, perturb: bool) -> f64 {
    let task = &prep.env.tasks.forward;
    let ok = (0..TRIALS)
        .filter(|&i| {
            let start = reset(task, &prep.env.sim, mix(9, i as u64), perturb);
            moka_executor(&prep.env, task, start, seq.blocks(), &prep.grid, &prep.projection)
                .unwrap()
                .success
        })
        .count();
    ok as f64 / TRIALS as f64
}

#[test]
fn precise_start_succeeds_and_perturbed_starts_degrade() {
    let (prep, seq) = setup();
    let precise = rate(&prep, &seq, false);
    let perturbed = rate(&prep, &seq, true);
    assert_eq!(precise, 1.0);
    assert!(
        precise - perturbed >= MIN_DROP,
        "precise {precise} perturbed {perturbed}"
    );
}

#[test]
fn empty_sequence_is_an_error() {
    let (prep, _) = setup();
    let task = &prep.env.tasks.forward;
    let start = reset(task, &prep.env.sim, 0, false);
    let err = moka_executor(&prep.env, task, start, &[], &prep.grid, &prep.projection).unwrap_err();
    assert!(matches!(err, LearnError::EmptySequence));
}

#[test]
fn unreachable_waypoints_are_flagged() {
    let (prep, seq) = setup();
    let task = &prep.env.tasks.forward;
    let start = reset(task, &prep.env.sim, 0, false);
    let mut shifted = prep.projection;
    shifted.top[0][3] -= 200.0;
    let out = moka_executor(&prep.env, task, start.clone(), seq.blocks(), &prep.grid, &shifted).unwrap();
    assert!(out.unreachable && !out.success && out.episode.is_none());

    let flat = Projection {
        side: [[0.0; 4]; 2],
        ..prep.projection
    };
    let err = moka_executor(
        &prep.env,
        task,
        start,
        &[WaypointBlock::new(0, 0, 0)],
        &prep.grid,
        &flat,
    )
    .unwrap_err();
    assert!(matches!(err, LearnError::NonInvertibleProjection));
}
