use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::{observe, OBS_DIM};
use crate::reward::LabeledFrame;
use crate::sim::{Episode, TaskSpec, ACTION_DIM};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub obs: [f64; OBS_DIM],
    pub action: [f64; ACTION_DIM],
    pub reward: f64,
    pub next_obs: [f64; OBS_DIM],
    /// The next state is a terminal success, treated as absorbing.
    pub done: bool,
    pub mc_return: f64,
    pub offline: bool,
}

/// Value of an absorbing state that pays `reward` every step.
pub fn absorbing_value(reward: f64, gamma: f64) -> f64 {
    reward / (1.0 - gamma)
}

/// Transitions of one labeled episode. The reward of step `t` is the label
/// of frame `t + 1`. A frame the success classifier accepts is absorbing when
/// `observes_success` is set; otherwise every episode end is a horizon cut.
/// Returns-to-go use the absorbing value or a zero tail accordingly.
pub fn episode_transitions(
    episode: &Episode,
    labels: &[LabeledFrame],
    task: &TaskSpec,
    delta_max: f64,
    gamma: f64,
    offline: bool,
    observes_success: bool,
) -> Vec<Transition> {
    assert_eq!(episode.frames.len(), labels.len(), "one label per frame");
    let n = episode.num_steps();
    let mut out: Vec<Transition> = (0..n)
        .map(|t| {
            let (f, next) = (&episode.frames[t], &episode.frames[t + 1]);
            Transition {
                obs: observe(&f.state, task),
                action: f
                    .action
                    .expect("non-final frames carry actions")
                    .to_normalized(delta_max),
                reward: labels[t + 1].r,
                next_obs: observe(&next.state, task),
                done: observes_success && labels[t + 1].r_sparse == 1,
                mc_return: 0.0,
                offline,
            }
        })
        .collect();
    let mut g = 0.0;
    for tr in out.iter_mut().rev() {
        g = if tr.done {
            absorbing_value(tr.reward, gamma)
        } else {
            tr.reward + gamma * g
        };
        tr.mc_return = g;
    }
    out
}

/// Fixed-capacity ring that overwrites its oldest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ring<T> {
    capacity: usize,
    items: Vec<T>,
    next: usize,
}

impl<T> Ring<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "ring capacity must be positive");
        Self {
            capacity,
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.next] = item;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    /// Items from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &T> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }
}

/// Offline and online partitions sampled at a fixed ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub offline: Ring<Transition>,
    pub online: Ring<Transition>,
}

impl ReplayBuffer {
    pub fn new(offline_capacity: usize, online_capacity: usize) -> Self {
        Self {
            offline: Ring::new(offline_capacity),
            online: Ring::new(online_capacity),
        }
    }

    pub fn push(&mut self, t: Transition) {
        if t.offline {
            self.offline.push(t);
        } else {
            self.online.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.offline.len() + self.online.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `n` uniform draws with about `offline_fraction` of them from the
    /// offline partition; an empty partition cedes its share to the other.
    pub fn sample<R: Rng>(&self, n: usize, offline_fraction: f64, rng: &mut R) -> Vec<&Transition> {
        if self.is_empty() {
            return Vec::new();
        }
        let n_off = if self.online.is_empty() {
            n
        } else if self.offline.is_empty() {
            0
        } else {
            (n as f64 * offline_fraction).round() as usize
        };
        let mut out = Vec::with_capacity(n);
        for _ in 0..n_off {
            out.push(self.offline.get(rng.random_range(0..self.offline.len())));
        }
        for _ in n_off..n {
            out.push(self.online.get(rng.random_range(0..self.online.len())));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(reward: f64, offline: bool) -> Transition {
        Transition {
            obs: [0.0; OBS_DIM],
            action: [0.0; ACTION_DIM],
            reward,
            next_obs: [0.0; OBS_DIM],
            done: false,
            mc_return: 0.0,
            offline,
        }
    }

    proptest! {
        #[test]
        fn ring_drops_oldest(capacity in 1usize..50, extra in 0usize..60) {
            let mut r = Ring::new(capacity);
            for i in 0..capacity + extra {
                r.push(i);
            }
            prop_assert_eq!(r.len(), capacity);
            let kept: Vec<usize> = r.iter().copied().collect();
            prop_assert_eq!(kept, (extra..capacity + extra).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sampling_ratio_and_determinism() {
        let mut b = ReplayBuffer::new(100, 100);
        for i in 0..50 {
            b.push(tr(i as f64, true));
            b.push(tr(-(i as f64), false));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = b.sample(64, 0.5, &mut rng);
        assert_eq!(s.iter().filter(|t| t.offline).count(), 32);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(b.sample(16, 0.5, &mut r1), b.sample(16, 0.5, &mut r2));

        let mut only_off = ReplayBuffer::new(10, 10);
        only_off.push(tr(1.0, true));
        assert_eq!(only_off.sample(8, 0.5, &mut rng).len(), 8);
        assert!(ReplayBuffer::new(1, 1).sample(8, 0.5, &mut rng).is_empty());
    }

    #[test]
    fn monte_carlo_returns() {
        use crate::geometry::PixelPoint3;
        use crate::sim::{reset, Action, BinSide, Direction, EpisodeKind, Frame, SimParams, TaskPair};
        let pair = TaskPair::bin_sort(BinSide::Left);
        let s = reset(&pair.forward, &SimParams::default(), 0, false);
        let frame = |t: usize, success: bool| Frame {
            t,
            state: s.clone(),
            action: (t < 2).then(Action::noop),
            success,
        };
        let ep = Episode {
            id: 0,
            direction: Direction::Forward,
            kind: EpisodeKind::Demo,
            frames: vec![frame(0, false), frame(1, false), frame(2, true)],
        };
        let label = |r: f64, r_sparse: u8| LabeledFrame {
            t: 0,
            robot_pixel: PixelPoint3::new(0.0, 0.0, 0.0),
            object_pixel: None,
            nearest_index: None,
            target_index: None,
            d_t: None,
            r_dense: None,
            r_obj: None,
            r_sparse,
            r,
        };
        let labels = [label(0.0, 0), label(0.5, 0), label(1.0, 1)];
        let trs = episode_transitions(&ep, &labels, &pair.forward, 0.05, 0.9, true, true);
        assert_eq!(trs.len(), 2);
        assert!(trs[1].done && !trs[0].done);
        assert!((trs[1].mc_return - 10.0).abs() < 1e-12);
        assert!((trs[0].mc_return - (0.5 + 0.9 * 10.0)).abs() < 1e-12);
        // Without a success signal the end is a horizon cut.
        let cut = episode_transitions(&ep, &labels, &pair.forward, 0.05, 0.9, true, false);
        assert!(cut.iter().all(|t| !t.done));
        assert!((cut[1].mc_return - 1.0).abs() < 1e-12);
        assert!((cut[0].mc_return - 1.4).abs() < 1e-12);
    }
}
