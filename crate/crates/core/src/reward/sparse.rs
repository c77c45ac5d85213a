use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::RewardError;
use crate::seed::mix;
use crate::sim::{TaskSpec, WorldState};

/// Simulated success detector queried with `k_prompts` task-completion
/// prompts. Each prompt answer is the ground truth flipped with the given
/// error rates; the detector reports success only on unanimous agreement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparseClassifier {
    pub k_prompts: usize,
    pub p_fp: f64,
    pub p_fn: f64,
    pub seed: u64,
}

impl SparseClassifier {
    pub fn new(k_prompts: usize, p_fp: f64, p_fn: f64, seed: u64) -> Result<Self, RewardError> {
        let rate_ok = |p: f64| (0.0..1.0).contains(&p);
        if k_prompts == 0 || !rate_ok(p_fp) || !rate_ok(p_fn) {
            return Err(RewardError::Params(format!(
                "need k_prompts >= 1 and rates in [0, 1), got k={k_prompts}, p_fp={p_fp}, p_fn={p_fn}"
            )));
        }
        Ok(Self {
            k_prompts,
            p_fp,
            p_fn,
            seed,
        })
    }

    pub fn noiseless(seed: u64) -> Self {
        Self {
            k_prompts: 4,
            p_fp: 0.0,
            p_fn: 0.0,
            seed,
        }
    }

    /// Consensus vote for one frame. The noise stream is keyed by
    /// `(seed, episode, frame)` so labels do not depend on evaluation order.
    pub fn evaluate(&self, truth: bool, episode: u64, frame: u64) -> u8 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(self.seed, episode), frame));
        let flip = if truth { self.p_fn } else { self.p_fp };
        let vote = |rng: &mut ChaCha8Rng| {
            let flipped = flip > 0.0 && rng.random::<f64>() < flip;
            truth != flipped
        };
        // Every prompt is drawn so the stream layout is independent of the votes.
        let votes: Vec<bool> = (0..self.k_prompts).map(|_| vote(&mut rng)).collect();
        u8::from(votes.iter().all(|&v| v))
    }

    pub fn sparse_reward(&self, task: &TaskSpec, state: &WorldState, episode: u64, frame: u64) -> u8 {
        self.evaluate(task.is_success(state), episode, frame)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_matches_truth() {
        let c = SparseClassifier::noiseless(1);
        for f in 0..100 {
            assert_eq!(c.evaluate(true, 3, f), 1);
            assert_eq!(c.evaluate(false, 3, f), 0);
        }
    }

    #[test]
    fn consensus_true_positive_rate() {
        let c = SparseClassifier::new(4, 0.0, 0.1, 9).unwrap();
        let n = 200_000u64;
        let hits: u64 = (0..n).map(|i| c.evaluate(true, i / 1000, i % 1000) as u64).sum();
        let rate = hits as f64 / n as f64;
        let p = 0.9f64.powi(4);
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() < 3.0 * sigma, "rate {rate} vs {p}");
    }

    #[test]
    fn invalid_rates() {
        assert!(SparseClassifier::new(0, 0.1, 0.1, 0).is_err());
        assert!(SparseClassifier::new(4, 1.0, 0.1, 0).is_err());
        assert!(SparseClassifier::new(4, 0.1, -0.1, 0).is_err());
    }

    #[test]
    fn keyed_by_frame() {
        let c = SparseClassifier::new(4, 0.5, 0.5, 5).unwrap();
        let a: Vec<u8> = (0..50).map(|f| c.evaluate(false, 1, f)).collect();
        let b: Vec<u8> = (0..50).rev().map(|f| c.evaluate(false, 1, f)).collect();
        assert_eq!(a, b.into_iter().rev().collect::<Vec<_>>());
    }
}
