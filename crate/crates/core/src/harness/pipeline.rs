//! Per-seed pipeline and the experiment suites built on it.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ProviderKind};
use super::output::{emit_plots, write_curves, write_results, CurveRow, ResultRow};
use super::HarnessError;
use crate::geometry::{BlockSequence, GridSpec};
use crate::learn::{
    demo_buffer, evaluate, finetune_online, generate_demo_set, moka_executor, pretrain_offline, Agent, CurvePoint,
    DemoCounts, Env,
};
use crate::log::{read_episodes, write_episode};
use crate::prompting::{
    build_annotation, cached_query, AnnotatedObservation, FileProvider, OracleProvider, PromptError, RemoteProvider,
    WaypointProvider,
};
use crate::reward::{calibrate_cameras, Formulation, RewardEngine};
use crate::seed::{mix, split};
use crate::sim::{reset, Direction, Episode, Projection, SimParams};

/// Keypoint sampling seed of the waypoint annotations. Waypoints are queried
/// once per output directory, so they do not depend on the training seed.
pub const ANNOTATION_SEED: u64 = 0x5eed;

struct FallbackProvider {
    primary: RemoteProvider,
    oracle: OracleProvider,
}

impl WaypointProvider for FallbackProvider {
    fn name(&self) -> &str {
        "remote"
    }

    fn query(&mut self, annotation: &AnnotatedObservation, instruction: &str) -> Result<BlockSequence, PromptError> {
        self.primary.query(annotation, instruction).or_else(|e| {
            eprintln!("warning: remote provider failed ({e}); using the oracle");
            self.oracle.query(annotation, instruction)
        })
    }
}

/// Provider for one direction. File providers read `<waypoint_path>/<direction>.json`.
pub fn make_provider(cfg: &ExperimentConfig, direction: Direction) -> Result<Box<dyn WaypointProvider>, HarnessError> {
    let oracle = OracleProvider {
        z_low: 0,
        z_lift: cfg.oracle_lift_level,
    };
    Ok(match cfg.provider {
        ProviderKind::Oracle => Box::new(oracle),
        ProviderKind::File => {
            let dir = cfg.waypoint_path.clone().unwrap_or_default();
            Box::new(FileProvider {
                path: dir.join(format!("{}.json", direction_name(direction))),
            })
        }
        ProviderKind::Remote => {
            let endpoint = cfg.endpoint().ok_or_else(|| {
                super::ConfigError::Invalid(vec![super::FieldError {
                    field: "endpoint_base_url",
                    message: "required when provider = \"remote\"".into(),
                }])
            })?;
            let primary = RemoteProvider::new(endpoint);
            if cfg.fallback_to_oracle {
                Box::new(FallbackProvider { primary, oracle })
            } else {
                Box::new(primary)
            }
        }
    })
}

fn direction_name(d: Direction) -> &'static str {
    match d {
        Direction::Forward => "forward",
        Direction::Backward => "backward",
    }
}

pub fn env_for(cfg: &ExperimentConfig) -> Env {
    Env {
        tasks: cfg.tasks(),
        sim: SimParams::default(),
    }
}

/// Annotates the nominal start of each direction and returns its waypoint
/// sequence, cached under `<out>/waypoints/`.
pub fn acquire_waypoints(cfg: &ExperimentConfig, out: &Path) -> Result<(BlockSequence, BlockSequence), HarnessError> {
    let env = env_for(cfg);
    let (grid, proj) = (cfg.grid(), cfg.projection());
    let get = |dir: Direction| -> Result<BlockSequence, HarnessError> {
        let task = env.tasks.task(dir);
        let state = reset(task, &env.sim, 0, false);
        let annotation = build_annotation(&state, task, &proj, &grid, ANNOTATION_SEED)?;
        let mut provider = make_provider(cfg, dir)?;
        let cache = out.join("waypoints").join(format!("{}.json", direction_name(dir)));
        Ok(cached_query(provider.as_mut(), &cache, &annotation, &task.instruction)?)
    };
    Ok((get(Direction::Forward)?, get(Direction::Backward)?))
}

/// Everything a seed needs before learning starts.
#[derive(Debug)]
pub struct Prepared {
    pub env: Env,
    pub engine: RewardEngine,
    pub grid: GridSpec,
    pub projection: Projection,
}

/// Calibrates the camera regressors and builds the reward engine for `seed`.
pub fn prepare(
    cfg: &ExperimentConfig,
    seed: u64,
    waypoints: &(BlockSequence, BlockSequence),
) -> Result<Prepared, HarnessError> {
    let env = env_for(cfg);
    let projection = cfg.projection();
    let regressors = calibrate_cameras(
        &projection,
        cfg.calibration_samples,
        cfg.calibration_outlier_fraction,
        cfg.image_width.max(cfg.image_height) as f64,
        split(seed, "calibration"),
    )?;
    let mut engine = RewardEngine::new(
        cfg.reward_params(),
        regressors,
        cfg.classifier(split(seed, "classifier")),
        projection,
        env.tasks.clone(),
    )
    .with_waypoints(waypoints.0.clone(), waypoints.1.clone())?;
    engine.object_mode = cfg.object_reward;
    Ok(Prepared {
        env,
        engine,
        grid: cfg.grid(),
        projection,
    })
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub formulation: Formulation,
    /// Success rate before online training (first curve point).
    pub pretrained_success: f64,
    pub final_success: f64,
    pub curve: Vec<CurvePoint>,
    pub online_successes: [u64; 2],
    pub agent: Agent,
}

impl SeedRun {
    pub fn curve_rows(&self) -> Vec<CurveRow> {
        self.curve
            .iter()
            .map(|p| CurveRow {
                step: p.step,
                seed: self.seed,
                formulation: self.formulation.as_str().to_string(),
                success_rate: p.success_rate,
                mean_reward: p.mean_reward,
            })
            .collect()
    }
}

/// Demonstrations of one seed and the policy pretrained on them.
#[derive(Debug, Clone)]
pub struct PretrainedSeed {
    pub demos: Vec<Episode>,
    pub agent: Agent,
}

/// Generates the demo set and pretrains on it, labeled under `labels`.
pub fn pretrain_seed(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    counts: DemoCounts,
    labels: Formulation,
    seed: u64,
) -> Result<PretrainedSeed, HarnessError> {
    let hyper = cfg.hyperparams();
    let env = &prepared.env;
    let demos = generate_demo_set(env, &cfg.expert(), counts, split(seed, "demos"));
    let buffer = demo_buffer(&prepared.engine, env, &demos, labels, &hyper)?;
    let agent = pretrain_offline(&buffer, &hyper, split(seed, "learner"))?;
    Ok(PretrainedSeed { demos, agent })
}

/// Relabels the demos under `formulation` and fine-tunes the pretrained
/// policy online. When `out` is set the labeled demonstrations and the final
/// checkpoint are written there.
pub fn finetune_seed(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    pretrained: &PretrainedSeed,
    formulation: Formulation,
    online_steps: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<SeedRun, HarnessError> {
    let mut hyper = cfg.hyperparams();
    hyper.online_steps = online_steps;
    let env = &prepared.env;
    let demos = &pretrained.demos;
    let buffer = demo_buffer(&prepared.engine, env, demos, formulation, &hyper)?;
    let trainer = finetune_online(
        pretrained.agent.clone(),
        buffer,
        &prepared.engine,
        env,
        &hyper,
        formulation,
        split(seed, "learner"),
    )?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
        let path = dir.join("demos.jsonl");
        let file = fs::File::create(&path).map_err(HarnessError::io(&path))?;
        let mut w = BufWriter::new(file);
        for ep in demos {
            let labels = prepared.engine.label_episode(ep, formulation)?;
            write_episode(&mut w, ep, Some(&labels))?;
        }
        w.flush().map_err(HarnessError::io(&path))?;
        let path = dir.join("checkpoint.json");
        fs::write(&path, trainer.to_checkpoint()?).map_err(HarnessError::io(&path))?;
    }
    let curve = trainer.curve.clone();
    Ok(SeedRun {
        seed,
        formulation,
        pretrained_success: curve.first().map_or(0.0, |p| p.success_rate),
        final_success: curve.last().map_or(0.0, |p| p.success_rate),
        curve,
        online_successes: trainer.online_successes,
        agent: trainer.agent,
    })
}

/// Demonstrations, offline pretraining and online fine-tuning for one seed.
pub fn train_seed(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    formulation: Formulation,
    counts: DemoCounts,
    online_steps: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<SeedRun, HarnessError> {
    let pretrained = pretrain_seed(cfg, prepared, counts, cfg.pretrain_labels(formulation), seed)?;
    finetune_seed(cfg, prepared, &pretrained, formulation, online_steps, seed, out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn pct(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

/// Trains every configured seed with the configured formulation and writes
/// `curves.csv`, `results.csv`, `curves.svg` and per-seed artifacts to `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SeedRun>, HarnessError> {
    cfg.validate()?;
    let waypoints = acquire_waypoints(cfg, out)?;
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let prepared = prepare(cfg, seed, &waypoints)?;
        let dir = out.join(format!("seed_{seed}"));
        runs.push(train_seed(
            cfg,
            &prepared,
            cfg.formulation,
            cfg.demo_counts(),
            cfg.online_steps,
            seed,
            Some(&dir),
        )?);
    }
    let rows: Vec<CurveRow> = runs.iter().flat_map(SeedRun::curve_rows).collect();
    write_curves(&out.join("curves.csv"), &rows)?;
    let results = vec![
        result_row(
            "pretrained",
            cfg,
            "standard",
            runs.iter().map(|r| r.pretrained_success),
            runs.len(),
        ),
        result_row(
            cfg.formulation.as_str(),
            cfg,
            "standard",
            runs.iter().map(|r| r.final_success),
            runs.len(),
        ),
    ];
    write_results(&out.join("results.csv"), &results)?;
    emit_plots(&[("curves".to_string(), rows)], out)?;
    Ok(runs)
}

fn result_row(
    method: &str,
    cfg: &ExperimentConfig,
    regime: &str,
    rates: impl Iterator<Item = f64>,
    seeds: usize,
) -> ResultRow {
    ResultRow {
        method: method.to_string(),
        task: cfg.task.clone(),
        regime: regime.to_string(),
        success_pct: pct(mean(rates)),
        trials: cfg.eval_trials,
        seeds,
    }
}

/// A demonstration budget with its online step budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Regime {
    pub name: &'static str,
    pub counts: DemoCounts,
    pub online_steps: usize,
}

/// The configured demo counts, then halved and divided by five. The smallest
/// regime gets `reduced_budget_factor` times the online budget.
pub fn regimes(cfg: &ExperimentConfig) -> [Regime; 3] {
    let scale = |n: usize, d: f64| ((n as f64 / d).round() as usize).max(1);
    let counts = |d: f64| {
        DemoCounts::new(
            scale(cfg.demo_forward, d),
            scale(cfg.demo_backward, d),
            scale(cfg.demo_failure, d),
        )
    };
    [
        Regime {
            name: "standard",
            counts: cfg.demo_counts(),
            online_steps: cfg.online_steps,
        },
        Regime {
            name: "reduced_2x",
            counts: counts(2.0),
            online_steps: cfg.online_steps,
        },
        Regime {
            name: "reduced_5x",
            counts: counts(5.0),
            online_steps: (cfg.online_steps as f64 * cfg.reduced_budget_factor).round() as usize,
        },
    ]
}

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub runs: Vec<(Regime, Formulation, Vec<SeedRun>)>,
}

impl AblationResult {
    pub fn get(&self, regime: &str, formulation: Formulation) -> Option<&[SeedRun]> {
        self.runs
            .iter()
            .find(|(r, f, _)| r.name == regime && *f == formulation)
            .map(|(_, _, v)| v.as_slice())
    }

    /// Mean final success rate across seeds, in `[0, 1]`.
    pub fn final_mean(&self, regime: &str, formulation: Formulation) -> Option<f64> {
        self.get(regime, formulation)
            .map(|v| mean(v.iter().map(|r| r.final_success)))
    }

    pub fn pretrained_mean(&self, regime: &str, formulation: Formulation) -> Option<f64> {
        self.get(regime, formulation)
            .map(|v| mean(v.iter().map(|r| r.pretrained_success)))
    }
}

/// Every formulation in every regime for every seed. Writes
/// `ablation/<regime>/<formulation>/curves.csv`, `ablation/results.csv` and
/// one plot per regime under `ablation/plots/`.
pub fn ablation_suite(
    cfg: &ExperimentConfig,
    out: &Path,
    mut progress: impl FnMut(&Regime, Formulation, &SeedRun),
) -> Result<AblationResult, HarnessError> {
    cfg.validate()?;
    let waypoints = acquire_waypoints(cfg, out)?;
    let root = out.join("ablation");
    let prepared: Vec<Prepared> = cfg
        .seeds
        .iter()
        .map(|&s| prepare(cfg, s, &waypoints))
        .collect::<Result<_, _>>()?;
    let mut result = AblationResult { runs: Vec::new() };
    let mut results = Vec::new();
    let mut plots = Vec::new();
    for regime in regimes(cfg) {
        let mut regime_rows = Vec::new();
        let mut pretrained: Vec<(Formulation, Vec<PretrainedSeed>)> = Vec::new();
        for formulation in Formulation::ALL {
            let labels = cfg.pretrain_labels(formulation);
            if !pretrained.iter().any(|(l, _)| *l == labels) {
                let seeds = cfg
                    .seeds
                    .iter()
                    .zip(&prepared)
                    .map(|(&seed, prep)| pretrain_seed(cfg, prep, regime.counts, labels, seed))
                    .collect::<Result<_, _>>()?;
                pretrained.push((labels, seeds));
            }
            let pre = &pretrained
                .iter()
                .find(|(l, _)| *l == labels)
                .expect("pretrained above")
                .1;
            let mut runs = Vec::new();
            for ((&seed, prep), pre) in cfg.seeds.iter().zip(&prepared).zip(pre) {
                let run = finetune_seed(cfg, prep, pre, formulation, regime.online_steps, seed, None)?;
                progress(&regime, formulation, &run);
                runs.push(run);
            }
            let rows: Vec<CurveRow> = runs.iter().flat_map(SeedRun::curve_rows).collect();
            write_curves(
                &root.join(regime.name).join(formulation.as_str()).join("curves.csv"),
                &rows,
            )?;
            regime_rows.extend(rows);
            if formulation == Formulation::Combined {
                results.push(result_row(
                    "pretrained",
                    cfg,
                    regime.name,
                    runs.iter().map(|r| r.pretrained_success),
                    runs.len(),
                ));
            }
            results.push(result_row(
                formulation.as_str(),
                cfg,
                regime.name,
                runs.iter().map(|r| r.final_success),
                runs.len(),
            ));
            result.runs.push((regime, formulation, runs));
        }
        plots.push((regime.name.to_string(), regime_rows));
    }
    write_results(&root.join("results.csv"), &results)?;
    emit_plots(&plots, &root.join("plots"))?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MokaComparison {
    /// Open-loop waypoint execution from the nominal start.
    pub moka_precise: f64,
    /// Open-loop waypoint execution from perturbed starts.
    pub moka_perturbed: f64,
    /// Fine-tuned combined-reward policy from the same perturbed starts.
    pub finetuned_perturbed: f64,
    pub trials: usize,
    pub seeds: usize,
}

fn moka_rate(
    prep: &Prepared,
    blocks: &BlockSequence,
    trials: usize,
    eval_seed: u64,
    perturb: bool,
) -> Result<f64, HarnessError> {
    let task = &prep.env.tasks.forward;
    let mut ok = 0usize;
    for trial in 0..trials {
        let start = reset(task, &prep.env.sim, mix(eval_seed, trial as u64), perturb);
        let outcome = moka_executor(&prep.env, task, start, blocks.blocks(), &prep.grid, &prep.projection)?;
        ok += outcome.success as usize;
    }
    Ok(ok as f64 / trials.max(1) as f64)
}

/// Compares the open-loop executor on precise and perturbed starts against
/// the fine-tuned combined policy. `agents` reuses already trained policies
/// (one per configured seed); otherwise each seed is trained here.
pub fn moka_comparison(
    cfg: &ExperimentConfig,
    out: &Path,
    agents: Option<&[Agent]>,
) -> Result<MokaComparison, HarnessError> {
    cfg.validate()?;
    let waypoints = acquire_waypoints(cfg, out)?;
    let trials = cfg.eval_trials;
    let (mut precise, mut perturbed, mut tuned) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &seed) in cfg.seeds.iter().enumerate() {
        let prep = prepare(cfg, seed, &waypoints)?;
        let eval_seed = split(split(seed, "learner"), "eval");
        precise.push(moka_rate(&prep, &waypoints.0, trials, eval_seed, false)?);
        perturbed.push(moka_rate(&prep, &waypoints.0, trials, eval_seed, true)?);
        let rate = match agents.and_then(|a| a.get(i)) {
            Some(agent) => evaluate(agent, &prep.env, trials, eval_seed, true),
            None => {
                train_seed(
                    cfg,
                    &prep,
                    Formulation::Combined,
                    cfg.demo_counts(),
                    cfg.online_steps,
                    seed,
                    None,
                )?
                .final_success
            }
        };
        tuned.push(rate);
    }
    let cmp = MokaComparison {
        moka_precise: mean(precise.into_iter()),
        moka_perturbed: mean(perturbed.into_iter()),
        finetuned_perturbed: mean(tuned.into_iter()),
        trials,
        seeds: cfg.seeds.len(),
    };
    let row = |method: &str, regime: &str, rate: f64| ResultRow {
        method: method.to_string(),
        task: cfg.task.clone(),
        regime: regime.to_string(),
        success_pct: pct(rate),
        trials,
        seeds: cmp.seeds,
    };
    write_results(
        &out.join("moka").join("results.csv"),
        &[
            row("moka", "precise", cmp.moka_precise),
            row("moka", "perturbed", cmp.moka_perturbed),
            row("finetuned_combined", "perturbed", cmp.finetuned_perturbed),
        ],
    )?;
    Ok(cmp)
}

/// Relabels every episode of a JSONL log under `formulation` and writes the
/// labeled log to `output`. Returns the number of episodes.
pub fn label_log(
    cfg: &ExperimentConfig,
    input: &Path,
    output: &Path,
    formulation: Formulation,
    seed: u64,
    out: &Path,
) -> Result<usize, HarnessError> {
    cfg.validate()?;
    let waypoints = acquire_waypoints(cfg, out)?;
    let prep = prepare(cfg, seed, &waypoints)?;
    let file = fs::File::open(input).map_err(HarnessError::io(input))?;
    let episodes = read_episodes(BufReader::new(file))?;
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    }
    let file = fs::File::create(output).map_err(HarnessError::io(output))?;
    let mut w = BufWriter::new(file);
    for ep in &episodes {
        let labels = prep.engine.label_episode(ep, formulation)?;
        write_episode(&mut w, ep, Some(&labels))?;
    }
    w.flush().map_err(HarnessError::io(output))?;
    Ok(episodes.len())
}
