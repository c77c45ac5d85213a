//! Demonstrations, offline pretraining, evaluation and the reset-free
//! online fine-tuning loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::agent::{Agent, Hyperparams};
use super::buffer::{episode_transitions, ReplayBuffer};
use super::features::observe;
use super::LearnError;
use crate::reward::{Formulation, RewardEngine};
use crate::seed::{mix, split};
use crate::sim::{
    generate_failure, reset, rollout, scripted_expert, Action, Direction, Episode, EpisodeKind, ExpertConfig,
    FailureMode, SimParams, TaskPair, WorldState,
};

/// Episode ids at or above this value are online episodes.
pub const ONLINE_EPISODE_BASE: u64 = 1 << 32;
/// Episode ids of evaluation rollouts.
pub const EVAL_EPISODE_BASE: u64 = 1 << 48;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Env {
    pub tasks: TaskPair,
    pub sim: SimParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DemoCounts {
    pub forward: usize,
    pub backward: usize,
    pub failure: usize,
}

impl DemoCounts {
    pub const fn new(forward: usize, backward: usize, failure: usize) -> Self {
        Self {
            forward,
            backward,
            failure,
        }
    }

    pub fn total(&self) -> usize {
        self.forward + self.backward + self.failure
    }
}

fn expert_demo(env: &Env, dir: Direction, cfg: &ExpertConfig, seed: u64, id: u64) -> Episode {
    let task = env.tasks.task(dir);
    for attempt in 0u64.. {
        let s = mix(seed, attempt);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let ep = rollout(
            task,
            &env.sim,
            reset(task, &env.sim, s, true),
            id,
            EpisodeKind::Demo,
            |st| scripted_expert(task, &env.sim, cfg, st, &mut rng).action,
        );
        if ep.succeeded() {
            return ep;
        }
    }
    unreachable!("attempt counter is unbounded")
}

/// Successful expert rollouts from perturbed resets for each direction, then
/// failures alternating between directions. Ids are the list positions.
pub fn generate_demo_set(env: &Env, cfg: &ExpertConfig, counts: DemoCounts, seed: u64) -> Vec<Episode> {
    let mut out = Vec::with_capacity(counts.total());
    for i in 0..counts.forward {
        out.push(expert_demo(
            env,
            Direction::Forward,
            cfg,
            mix(split(seed, "forward"), i as u64),
            out.len() as u64,
        ));
    }
    for i in 0..counts.backward {
        out.push(expert_demo(
            env,
            Direction::Backward,
            cfg,
            mix(split(seed, "backward"), i as u64),
            out.len() as u64,
        ));
    }
    for i in 0..counts.failure {
        let dir = if i % 2 == 0 {
            Direction::Forward
        } else {
            Direction::Backward
        };
        let mode = if (i / 2) % 2 == 0 {
            FailureMode::TruncatedExpert
        } else {
            FailureMode::RandomPolicy
        };
        let s = mix(split(seed, "failure"), i as u64);
        out.push(generate_failure(
            env.tasks.task(dir),
            &env.sim,
            cfg,
            s,
            out.len() as u64,
            mode,
        ));
    }
    out
}

/// Labels `episodes` under `formulation` and stores them as offline data.
pub fn demo_buffer(
    engine: &RewardEngine,
    env: &Env,
    episodes: &[Episode],
    formulation: Formulation,
    hyper: &Hyperparams,
) -> Result<ReplayBuffer, LearnError> {
    let mut transitions = Vec::new();
    for ep in episodes {
        let labels = engine.label_episode(ep, formulation)?;
        transitions.extend(episode_transitions(
            ep,
            &labels,
            env.tasks.task(ep.direction),
            env.sim.delta_max,
            hyper.gamma,
            true,
            formulation.observes_success(),
        ));
    }
    let mut buffer = ReplayBuffer::new(transitions.len().max(1), hyper.online_capacity);
    for t in transitions {
        buffer.push(t);
    }
    Ok(buffer)
}

/// Behavior cloning for `hyper.bc_steps` actor updates, then offline
/// actor-critic training for `hyper.offline_steps` updates.
pub fn pretrain_offline(buffer: &ReplayBuffer, hyper: &Hyperparams, seed: u64) -> Result<Agent, LearnError> {
    hyper.validate().map_err(LearnError::Hyper)?;
    if buffer.offline.is_empty() {
        return Err(LearnError::EmptyBuffer);
    }
    let mut init = ChaCha8Rng::seed_from_u64(split(seed, "init"));
    let mut agent = Agent::new(hyper, &mut init);
    let mut rng = ChaCha8Rng::seed_from_u64(split(seed, "pretrain"));
    for _ in 0..hyper.bc_steps {
        let batch = buffer.sample(hyper.batch_size, 1.0, &mut rng);
        agent.bc_update(&batch, hyper);
    }
    for _ in 0..hyper.offline_steps {
        let batch = buffer.sample(hyper.batch_size, 1.0, &mut rng);
        agent.update(&batch, hyper, hyper.offline_q_weight, hyper.bc_weight, &mut rng);
    }
    Ok(agent)
}

/// Mean-action rollout of the forward task from reset `trial` of `seed`.
pub fn eval_episode(agent: &Agent, env: &Env, seed: u64, trial: usize, perturb: bool) -> Episode {
    let task = &env.tasks.forward;
    let start = reset(task, &env.sim, mix(seed, trial as u64), perturb);
    rollout(
        task,
        &env.sim,
        start,
        EVAL_EPISODE_BASE + trial as u64,
        EpisodeKind::Eval,
        |s| Action::from_normalized(&agent.mean_action(&observe(s, task)), env.sim.delta_max),
    )
}

/// Fraction of `trials` forward-task rollouts that succeed.
pub fn evaluate(agent: &Agent, env: &Env, trials: usize, seed: u64, perturb: bool) -> f64 {
    let ok = (0..trials)
        .filter(|&i| eval_episode(agent, env, seed, i, perturb).succeeded())
        .count();
    ok as f64 / trials.max(1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub success_rate: f64,
    /// Mean per-step training reward since the previous point.
    pub mean_reward: f64,
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    trainer: Trainer,
}

/// State of an online fine-tuning run. Runs stop at episode boundaries, so a
/// trainer serialized between calls to [`Trainer::run`] resumes bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trainer {
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub hyper: Hyperparams,
    pub formulation: Formulation,
    pub eval_seed: u64,
    rng: ChaCha8Rng,
    state: WorldState,
    direction: Direction,
    pub env_steps: usize,
    pub episodes: u64,
    pub online_successes: [u64; 2],
    next_eval: usize,
    reward_sum: f64,
    reward_count: usize,
    pub curve: Vec<CurvePoint>,
}

impl Trainer {
    pub fn new(
        agent: Agent,
        buffer: ReplayBuffer,
        engine: &RewardEngine,
        env: &Env,
        hyper: &Hyperparams,
        formulation: Formulation,
        seed: u64,
    ) -> Result<Self, LearnError> {
        hyper.validate().map_err(LearnError::Hyper)?;
        if formulation.needs_dense() {
            for dir in [Direction::Forward, Direction::Backward] {
                if engine.waypoints(dir).is_none() {
                    return Err(LearnError::Reward(crate::reward::RewardError::MissingWaypoints(dir)));
                }
            }
        }
        let task = &env.tasks.forward;
        Ok(Self {
            agent,
            buffer,
            hyper: hyper.clone(),
            formulation,
            eval_seed: split(seed, "eval"),
            rng: ChaCha8Rng::seed_from_u64(split(seed, "online")),
            state: reset(task, &env.sim, split(seed, "start"), true),
            direction: Direction::Forward,
            env_steps: 0,
            episodes: 0,
            online_successes: [0, 0],
            next_eval: 0,
            reward_sum: 0.0,
            reward_count: 0,
            curve: Vec::new(),
        })
    }

    fn snapshot(&mut self, env: &Env, step: usize) {
        let success_rate = evaluate(&self.agent, env, self.hyper.eval_trials, self.eval_seed, true);
        let mean_reward = if self.reward_count > 0 {
            self.reward_sum / self.reward_count as f64
        } else {
            0.0
        };
        self.curve.push(CurvePoint {
            step,
            success_rate,
            mean_reward,
        });
        self.reward_sum = 0.0;
        self.reward_count = 0;
    }

    /// One reset-free episode: act with exploration noise, update after
    /// every step, then label the episode and append it to the buffer.
    pub fn run_episode(&mut self, engine: &RewardEngine, env: &Env) -> Result<Episode, LearnError> {
        let task = env.tasks.task(self.direction).clone();
        let hyper = &self.hyper;
        let (agent, buffer, rng) = (&mut self.agent, &self.buffer, &mut self.rng);
        let mut steps = 0usize;
        let ep = rollout(
            &task,
            &env.sim,
            self.state.clone(),
            ONLINE_EPISODE_BASE + self.episodes,
            EpisodeKind::Online,
            |s| {
                let a = agent.sample_action(&observe(s, &task), hyper.explore_std, rng);
                if !buffer.is_empty() {
                    for _ in 0..hyper.updates_per_step {
                        let batch = buffer.sample(hyper.batch_size, hyper.offline_fraction, rng);
                        agent.update(&batch, hyper, hyper.q_weight, hyper.online_bc_weight, rng);
                    }
                }
                steps += 1;
                Action::from_normalized(&a, env.sim.delta_max)
            },
        );
        let labels = engine.label_episode(&ep, self.formulation)?;
        for t in episode_transitions(
            &ep,
            &labels,
            &task,
            env.sim.delta_max,
            self.hyper.gamma,
            false,
            self.formulation.observes_success(),
        ) {
            self.reward_sum += t.reward;
            self.reward_count += 1;
            self.buffer.push(t);
        }
        if ep.succeeded() {
            self.online_successes[matches!(self.direction, Direction::Backward) as usize] += 1;
        }
        self.env_steps += steps;
        self.episodes += 1;
        self.state = ep.final_state().clone();
        self.direction = self.direction.flip();
        Ok(ep)
    }

    /// Runs episodes until at least `until` environment steps, recording an
    /// evaluation every `eval_interval` steps (and step 0 before training).
    pub fn run(&mut self, engine: &RewardEngine, env: &Env, until: usize) -> Result<&[CurvePoint], LearnError> {
        if self.curve.is_empty() {
            self.snapshot(env, 0);
            self.next_eval = self.hyper.eval_interval;
        }
        while self.env_steps < until {
            self.run_episode(engine, env)?;
            while self.next_eval <= self.env_steps && self.next_eval <= until {
                let step = self.next_eval;
                self.snapshot(env, step);
                self.next_eval += self.hyper.eval_interval;
            }
        }
        if self.curve.last().is_some_and(|p| p.step < until) && self.env_steps >= until {
            self.snapshot(env, until);
            self.next_eval = until + self.hyper.eval_interval;
        }
        Ok(&self.curve)
    }

    pub fn to_checkpoint(&self) -> Result<String, LearnError> {
        serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            trainer: self.clone(),
        })
        .map_err(|e| LearnError::Checkpoint(e.to_string()))
    }

    pub fn from_checkpoint(text: &str) -> Result<Self, LearnError> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| LearnError::Checkpoint(e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(LearnError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        Ok(c.trainer)
    }
}

/// Pretrained networks fine-tuned online for `hyper.online_steps` steps.
#[allow(clippy::too_many_arguments)]
pub fn finetune_online(
    agent: Agent,
    buffer: ReplayBuffer,
    engine: &RewardEngine,
    env: &Env,
    hyper: &Hyperparams,
    formulation: Formulation,
    seed: u64,
) -> Result<Trainer, LearnError> {
    let mut trainer = Trainer::new(agent, buffer, engine, env, hyper, formulation, seed)?;
    trainer.run(engine, env, hyper.online_steps)?;
    Ok(trainer)
}
