//! Twin-critic actor-critic with a return-calibrated conservative penalty.
//!
//! Critics regress onto clipped double-Q targets with target-policy
//! smoothing. The conservative term lowers Q on sampled actions (floored at
//! the observed return-to-go) and raises it on dataset actions. The actor
//! maximizes normalized Q with a behavior-cloning term on offline samples.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::adam::{clip_norm, Adam};
use super::buffer::{absorbing_value, Transition};
use super::features::OBS_DIM;
use super::mlp::Mlp;
use crate::sim::ACTION_DIM;

pub const CRITIC_IN: usize = OBS_DIM + ACTION_DIM;
/// Index of the gripper component in a normalized action.
const GRIPPER: usize = ACTION_DIM - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub gamma: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    /// Weight of the conservative penalty.
    pub conservative_weight: f64,
    /// Sampled actions per state for the conservative penalty.
    pub ood_actions: usize,
    pub tau: f64,
    pub policy_delay: usize,
    /// Weight of the normalized Q term in the actor loss online.
    pub q_weight: f64,
    /// The same weight during offline pretraining.
    pub offline_q_weight: f64,
    /// Actor-only behavior-cloning steps before offline actor-critic training.
    pub bc_steps: usize,
    pub bc_weight: f64,
    pub online_bc_weight: f64,
    pub explore_std: f64,
    pub target_noise: f64,
    pub target_noise_clip: f64,
    pub grad_clip: f64,
    pub offline_steps: usize,
    pub online_steps: usize,
    pub offline_fraction: f64,
    pub updates_per_step: usize,
    pub eval_interval: usize,
    pub eval_trials: usize,
    pub online_capacity: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            batch_size: 64,
            hidden: vec![64, 64],
            conservative_weight: 0.5,
            ood_actions: 2,
            tau: 0.005,
            policy_delay: 2,
            q_weight: 2.5,
            offline_q_weight: 2.5,
            bc_steps: 0,
            bc_weight: 1.0,
            online_bc_weight: 0.25,
            explore_std: 0.3,
            target_noise: 0.2,
            target_noise_clip: 0.5,
            grad_clip: 10.0,
            offline_steps: 10_000,
            online_steps: 12_000,
            offline_fraction: 0.5,
            updates_per_step: 1,
            eval_interval: 2_000,
            eval_trials: 20,
            online_capacity: 200_000,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), String> {
        let mut errs = Vec::new();
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            errs.push(format!("gamma must be in (0, 1), got {}", self.gamma));
        }
        if !(self.conservative_weight >= 0.0) {
            errs.push(format!(
                "conservative_weight must be >= 0, got {}",
                self.conservative_weight
            ));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            errs.push(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if !(0.0..=1.0).contains(&self.offline_fraction) {
            errs.push(format!(
                "offline_fraction must be in [0, 1], got {}",
                self.offline_fraction
            ));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("policy_delay", self.policy_delay),
            ("eval_interval", self.eval_interval),
            ("eval_trials", self.eval_trials),
            ("online_capacity", self.online_capacity),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            errs.push("hidden layer sizes must be positive".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs.join("; "))
        }
    }
}

/// Inputs of one critic loss evaluation; everything random is drawn here.
#[derive(Debug, Clone)]
pub struct CriticBatch {
    /// Observation and dataset action per column.
    pub sa: DMatrix<f64>,
    /// Observation and sampled action per column, `ood_actions` per state.
    pub sampled: DMatrix<f64>,
    pub targets: Vec<f64>,
    pub mc_returns: Vec<f64>,
    pub per_state: usize,
}

#[derive(Debug, Clone)]
pub struct ActorBatch {
    pub obs: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub offline: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: Option<f64>,
    pub mean_q: f64,
}

fn stack(obs: &DMatrix<f64>, act: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(CRITIC_IN, obs.ncols());
    m.rows_mut(0, OBS_DIM).copy_from(obs);
    m.rows_mut(OBS_DIM, ACTION_DIM).copy_from(act);
    m
}

fn columns<const N: usize>(items: impl ExactSizeIterator<Item = [f64; N]>) -> DMatrix<f64> {
    let n = items.len();
    let flat: Vec<f64> = items.flatten().collect();
    DMatrix::from_column_slice(N, n, &flat)
}

/// Squared TD error plus the conservative penalty, and its gradient in the
/// critic parameters.
pub fn critic_loss(critic: &Mlp, batch: &CriticBatch, conservative_weight: f64) -> (f64, Vec<f64>) {
    let b = batch.targets.len() as f64;
    let k = batch.per_state;
    let conservative_weight = if k > 0 { conservative_weight } else { 0.0 };
    let trace = critic.forward(&batch.sa).expect("critic input");
    let q = trace.output();
    let mut d_q = DMatrix::zeros(1, q.ncols());
    let mut loss = 0.0;
    for j in 0..q.ncols() {
        let e = q[(0, j)] - batch.targets[j];
        loss += e * e / b;
        d_q[(0, j)] = 2.0 * e / b - conservative_weight / b;
        loss -= conservative_weight * q[(0, j)] / b;
    }
    let mut grad = vec![0.0; critic.num_params()];
    critic.backward(&trace, &d_q, &mut grad);
    if conservative_weight > 0.0 {
        let trace_s = critic.forward(&batch.sampled).expect("critic input");
        let qs = trace_s.output();
        let mut d_s = DMatrix::zeros(1, qs.ncols());
        let w = conservative_weight / (b * k as f64);
        for j in 0..qs.ncols() {
            let floor = batch.mc_returns[j / k];
            if qs[(0, j)] > floor {
                loss += w * qs[(0, j)];
                d_s[(0, j)] = w;
            } else {
                loss += w * floor;
            }
        }
        critic.backward(&trace_s, &d_s, &mut grad);
    }
    (loss, grad)
}

/// `-scale * mean Q(s, pi(s)) + bc_weight * mean_offline |pi(s) - a|^2` and
/// its gradient in the actor parameters. `scale` is held constant.
pub fn actor_loss(actor: &Mlp, critic: &Mlp, batch: &ActorBatch, bc_weight: f64, scale: f64) -> (f64, Vec<f64>) {
    let n = batch.obs.ncols();
    let trace_a = actor.forward(&batch.obs).expect("actor input");
    let act = trace_a.output().map(f64::tanh);
    let trace_q = critic.forward(&stack(&batch.obs, &act)).expect("critic input");
    let q = trace_q.output();
    let mut loss = -scale * q.sum() / n as f64;
    let d_q = DMatrix::from_element(1, n, -scale / n as f64);
    let mut scratch = vec![0.0; critic.num_params()];
    let d_in = critic.backward(&trace_q, &d_q, &mut scratch);
    let mut d_act = d_in.rows(OBS_DIM, ACTION_DIM).into_owned();
    let n_off = batch.offline.iter().filter(|&&o| o).count();
    if bc_weight > 0.0 && n_off > 0 {
        for j in (0..n).filter(|&j| batch.offline[j]) {
            for r in 0..ACTION_DIM {
                let e = act[(r, j)] - batch.actions[(r, j)];
                loss += bc_weight * e * e / n_off as f64;
                d_act[(r, j)] += 2.0 * bc_weight * e / n_off as f64;
            }
        }
    }
    d_act.zip_apply(&act, |d, a| *d *= 1.0 - a * a);
    let mut grad = vec![0.0; actor.num_params()];
    actor.backward(&trace_a, &d_act, &mut grad);
    (loss, grad)
}

/// `mean |pi(s) - a|^2` over every sample and its gradient in the actor
/// parameters.
pub fn bc_loss(actor: &Mlp, batch: &ActorBatch) -> (f64, Vec<f64>) {
    let n = batch.obs.ncols();
    let trace = actor.forward(&batch.obs).expect("actor input");
    let act = trace.output().map(f64::tanh);
    let mut loss = 0.0;
    let mut d_act = DMatrix::zeros(ACTION_DIM, n);
    for j in 0..n {
        for r in 0..ACTION_DIM {
            let e = act[(r, j)] - batch.actions[(r, j)];
            loss += e * e / n as f64;
            d_act[(r, j)] = 2.0 * e / n as f64 * (1.0 - act[(r, j)] * act[(r, j)]);
        }
    }
    let mut grad = vec![0.0; actor.num_params()];
    actor.backward(&trace, &d_act, &mut grad);
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub actor: Mlp,
    pub critics: [Mlp; 2],
    pub target_critics: [Mlp; 2],
    pub target_actor: Mlp,
    actor_opt: Adam,
    critic_opts: [Adam; 2],
    pub updates: u64,
}

impl Agent {
    pub fn new<R: Rng>(hyper: &Hyperparams, rng: &mut R) -> Self {
        let sizes = |i: usize, o: usize| {
            let mut s = vec![i];
            s.extend(&hyper.hidden);
            s.push(o);
            s
        };
        let actor = Mlp::new(&sizes(OBS_DIM, ACTION_DIM), 0.1, rng);
        let critics = [
            Mlp::new(&sizes(CRITIC_IN, 1), 0.1, rng),
            Mlp::new(&sizes(CRITIC_IN, 1), 0.1, rng),
        ];
        Self {
            actor_opt: Adam::new(actor.num_params(), hyper.actor_lr),
            critic_opts: [
                Adam::new(critics[0].num_params(), hyper.critic_lr),
                Adam::new(critics[1].num_params(), hyper.critic_lr),
            ],
            target_actor: actor.clone(),
            target_critics: critics.clone(),
            actor,
            critics,
            updates: 0,
        }
    }

    /// Actor motion with the gripper command that the critics value higher.
    /// The gripper acts only through its sign, so the critic is a step
    /// function in that component and gives the actor no useful gradient.
    pub fn mean_action(&self, obs: &[f64; OBS_DIM]) -> [f64; ACTION_DIM] {
        let out = self.actor.forward_one(obs).expect("actor input");
        let mut a: [f64; ACTION_DIM] = std::array::from_fn(|i| out[i].tanh());
        a[GRIPPER] = self.greedy_gripper(obs, &a);
        a
    }

    fn greedy_gripper(&self, obs: &[f64; OBS_DIM], a: &[f64; ACTION_DIM]) -> f64 {
        let with = |g: f64| {
            let mut b = *a;
            b[GRIPPER] = g;
            self.q_value(obs, &b)
        };
        let (close, open) = (with(1.0), with(-1.0));
        if close > open || (close == open && a[GRIPPER] >= 0.0) {
            1.0
        } else {
            -1.0
        }
    }

    /// Mean action plus Gaussian noise, clamped to the action box.
    pub fn sample_action<R: Rng>(&self, obs: &[f64; OBS_DIM], std: f64, rng: &mut R) -> [f64; ACTION_DIM] {
        let mut a = self.mean_action(obs);
        if std > 0.0 {
            let n = Normal::new(0.0, std).expect("finite std");
            for v in &mut a {
                *v = (*v + n.sample(rng)).clamp(-1.0, 1.0);
            }
        }
        a
    }

    pub fn q_value(&self, obs: &[f64; OBS_DIM], action: &[f64; ACTION_DIM]) -> f64 {
        let mut x = obs.to_vec();
        x.extend_from_slice(action);
        let a = self.critics[0].forward_one(&x).expect("critic input")[0];
        let b = self.critics[1].forward_one(&x).expect("critic input")[0];
        a.min(b)
    }

    /// State value under the mean policy action.
    pub fn value(&self, obs: &[f64; OBS_DIM]) -> f64 {
        self.q_value(obs, &self.mean_action(obs))
    }

    pub fn critic_batch<R: Rng>(&self, batch: &[&Transition], hyper: &Hyperparams, rng: &mut R) -> CriticBatch {
        let n = batch.len();
        let obs = columns(batch.iter().map(|t| t.obs));
        let act = columns(batch.iter().map(|t| t.action));
        let next = columns(batch.iter().map(|t| t.next_obs));

        let smooth = Normal::new(0.0, hyper.target_noise.max(1e-12)).expect("finite std");
        let mut next_act = self
            .target_actor
            .forward(&next)
            .expect("actor input")
            .output()
            .map(f64::tanh);
        if hyper.target_noise > 0.0 {
            next_act.apply(|a| {
                let e = smooth
                    .sample(rng)
                    .clamp(-hyper.target_noise_clip, hyper.target_noise_clip);
                *a = (*a + e).clamp(-1.0, 1.0);
            });
        }
        // Bootstrap from the better gripper command, as the policy acts.
        let next_value = |g: f64, next_act: &mut DMatrix<f64>| {
            next_act.row_mut(GRIPPER).fill(g);
            let sa = stack(&next, next_act);
            let q1 = self.target_critics[0].forward(&sa).expect("critic input");
            let q2 = self.target_critics[1].forward(&sa).expect("critic input");
            q1.output().zip_map(q2.output(), f64::min)
        };
        let close = next_value(1.0, &mut next_act);
        let open = next_value(-1.0, &mut next_act);
        let v_max = absorbing_value(1.0, hyper.gamma);
        let targets = (0..n)
            .map(|j| {
                let t = batch[j];
                let y = if t.done {
                    absorbing_value(t.reward, hyper.gamma)
                } else {
                    t.reward + hyper.gamma * close[(0, j)].max(open[(0, j)])
                };
                y.clamp(0.0, v_max)
            })
            .collect();

        let k = hyper.ood_actions;
        let pi = self.actor.forward(&obs).expect("actor input").output().map(f64::tanh);
        let explore = Normal::new(0.0, hyper.explore_std.max(1e-12)).expect("finite std");
        let mut sampled = DMatrix::zeros(CRITIC_IN, n * k);
        for j in 0..n {
            for s in 0..k {
                let col = j * k + s;
                sampled.view_mut((0, col), (OBS_DIM, 1)).copy_from(&obs.column(j));
                for r in 0..ACTION_DIM {
                    sampled[(OBS_DIM + r, col)] = if s % 2 == 0 {
                        (pi[(r, j)] + explore.sample(rng)).clamp(-1.0, 1.0)
                    } else {
                        rng.random_range(-1.0..=1.0)
                    };
                }
            }
        }
        CriticBatch {
            sa: stack(&obs, &act),
            sampled,
            targets,
            mc_returns: batch.iter().map(|t| t.mc_return).collect(),
            per_state: k,
        }
    }

    pub fn actor_batch(batch: &[&Transition]) -> ActorBatch {
        ActorBatch {
            obs: columns(batch.iter().map(|t| t.obs)),
            actions: columns(batch.iter().map(|t| t.action)),
            offline: batch.iter().map(|t| t.offline).collect(),
        }
    }

    /// Normalizer of the Q term: `q_weight / mean |Q(s, pi(s))|`, with the
    /// mean floored at 1.
    pub fn q_scale(&self, batch: &ActorBatch, q_weight: f64) -> f64 {
        let act = self
            .actor
            .forward(&batch.obs)
            .expect("actor input")
            .output()
            .map(f64::tanh);
        let q = self.critics[0].forward(&stack(&batch.obs, &act)).expect("critic input");
        let mean_abs = q.output().iter().map(|v| v.abs()).sum::<f64>() / batch.obs.ncols().max(1) as f64;
        q_weight / mean_abs.max(1.0)
    }

    /// One behavior-cloning step of the actor alone; the target actor follows.
    pub fn bc_update(&mut self, batch: &[&Transition], hyper: &Hyperparams) -> f64 {
        let (loss, mut g) = bc_loss(&self.actor, &Self::actor_batch(batch));
        clip_norm(&mut g, hyper.grad_clip);
        self.actor_opt.step(&mut self.actor.params, &g);
        self.target_actor = self.actor.clone();
        loss
    }

    pub fn update<R: Rng>(
        &mut self,
        batch: &[&Transition],
        hyper: &Hyperparams,
        q_weight: f64,
        bc_weight: f64,
        rng: &mut R,
    ) -> UpdateStats {
        let cb = self.critic_batch(batch, hyper, rng);
        let mut stats = UpdateStats::default();
        for i in 0..2 {
            let (loss, mut g) = critic_loss(&self.critics[i], &cb, hyper.conservative_weight);
            clip_norm(&mut g, hyper.grad_clip);
            self.critic_opts[i].step(&mut self.critics[i].params, &g);
            stats.critic_loss += loss / 2.0;
        }
        stats.mean_q = cb.targets.iter().sum::<f64>() / cb.targets.len().max(1) as f64;
        self.updates += 1;
        if self.updates.is_multiple_of(hyper.policy_delay as u64) {
            let ab = Self::actor_batch(batch);
            let scale = self.q_scale(&ab, q_weight);
            let (loss, mut g) = actor_loss(&self.actor, &self.critics[0], &ab, bc_weight, scale);
            clip_norm(&mut g, hyper.grad_clip);
            self.actor_opt.step(&mut self.actor.params, &g);
            stats.actor_loss = Some(loss);
            self.target_actor.soft_update(&self.actor, hyper.tau);
            for i in 0..2 {
                self.target_critics[i].soft_update(&self.critics[i], hyper.tau);
            }
        }
        stats
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|i| Transition {
                obs: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                action: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                reward: rng.random_range(0.0..1.0),
                next_obs: std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                done: i % 5 == 0,
                mc_return: rng.random_range(-0.5..0.5),
                offline: i % 2 == 0,
            })
            .collect()
    }

    fn small_hyper() -> Hyperparams {
        Hyperparams {
            hidden: vec![8, 8],
            ..Default::default()
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
    }

    #[test]
    fn critic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let hyper = small_hyper();
        let agent = Agent::new(&hyper, &mut rng);
        let data = random_batch(&mut rng, 16);
        let refs: Vec<&Transition> = data.iter().collect();
        let cb = agent.critic_batch(&refs, &hyper, &mut rng);
        let critic = &agent.critics[0];
        let (_, grad) = critic_loss(critic, &cb, 0.7);
        let h = 1e-5;
        for k in 0..critic.num_params() {
            let (mut p, mut m) = (critic.clone(), critic.clone());
            p.params[k] += h;
            m.params[k] -= h;
            let fd = (critic_loss(&p, &cb, 0.7).0 - critic_loss(&m, &cb, 0.7).0) / (2.0 * h);
            assert!(rel_err(fd, grad[k]) <= 1e-4, "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn actor_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hyper = small_hyper();
        let agent = Agent::new(&hyper, &mut rng);
        let data = random_batch(&mut rng, 16);
        let refs: Vec<&Transition> = data.iter().collect();
        let ab = Agent::actor_batch(&refs);
        let (_, grad) = actor_loss(&agent.actor, &agent.critics[0], &ab, 0.8, 1.3);
        let h = 1e-5;
        for k in 0..agent.actor.num_params() {
            let (mut p, mut m) = (agent.actor.clone(), agent.actor.clone());
            p.params[k] += h;
            m.params[k] -= h;
            let lp = actor_loss(&p, &agent.critics[0], &ab, 0.8, 1.3).0;
            let lm = actor_loss(&m, &agent.critics[0], &ab, 0.8, 1.3).0;
            let fd = (lp - lm) / (2.0 * h);
            assert!(rel_err(fd, grad[k]) <= 1e-4, "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn zero_penalty_is_plain_td() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hyper = small_hyper();
        let agent = Agent::new(&hyper, &mut rng);
        let data = random_batch(&mut rng, 12);
        let refs: Vec<&Transition> = data.iter().collect();
        let cb = agent.critic_batch(&refs, &hyper, &mut rng);
        let critic = &agent.critics[1];
        let q = critic.forward(&cb.sa).unwrap();
        let td: f64 = q
            .output()
            .iter()
            .zip(&cb.targets)
            .map(|(q, y)| (q - y).powi(2))
            .sum::<f64>()
            / 12.0;
        let (loss, grad) = critic_loss(critic, &cb, 0.0);
        assert!((loss - td).abs() < 1e-12);
        let no_samples = CriticBatch {
            per_state: 0,
            ..cb.clone()
        };
        let (loss0, grad0) = critic_loss(critic, &no_samples, 0.0);
        assert_eq!((loss, grad), (loss0, grad0));
    }

    #[test]
    fn targets_are_bounded_and_absorbing() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let hyper = small_hyper();
        let agent = Agent::new(&hyper, &mut rng);
        let data = random_batch(&mut rng, 20);
        let refs: Vec<&Transition> = data.iter().collect();
        let cb = agent.critic_batch(&refs, &hyper, &mut rng);
        for (t, y) in data.iter().zip(&cb.targets) {
            assert!((0.0..=20.0 + 1e-9).contains(y));
            if t.done {
                assert!((y - t.reward / (1.0 - hyper.gamma)).abs() < 1e-12);
            }
        }
        assert_eq!(cb.sampled.ncols(), 20 * hyper.ood_actions);
    }

    #[test]
    fn validation() {
        assert!(Hyperparams::default().validate().is_ok());
        let bad = Hyperparams {
            gamma: 1.0,
            conservative_weight: -1.0,
            ..Default::default()
        };
        let msg = bad.validate().unwrap_err();
        assert!(msg.contains("gamma") && msg.contains("conservative_weight"));
    }

    #[test]
    fn updates_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let hyper = small_hyper();
            let mut agent = Agent::new(&hyper, &mut rng);
            let data = random_batch(&mut rng, 32);
            let refs: Vec<&Transition> = data.iter().collect();
            for _ in 0..10 {
                agent.update(&refs, &hyper, hyper.q_weight, 1.0, &mut rng);
            }
            agent
        };
        assert_eq!(run(), run());
    }
}
