//! Reward and punishment shaping for the sampling policy.
//!
//! The penalty for step t is the cosine similarity between the post-encoder
//! class embedding and that step's token: tokens that merely mirror the bag
//! representation are discouraged. The reward branch pays `r_star` when the
//! bag-level prediction matched the label and nothing otherwise, broadcast to
//! every step against its penalty.

use crate::sampler::cosine_or_neg_one;
use crate::sffr::StepToken;

/// Per-step penalties: cosine similarity of each step token to the class
/// embedding, with the zero-norm convention scoring -1.
pub fn compute_penalties(h_cls: &[f64], tokens: &[StepToken]) -> Vec<f64> {
    tokens.iter().map(|t| cosine_or_neg_one(h_cls, &t.vector)).collect()
}

/// Per-step feedback: `(correct ? r_star : 0) - penalty[t]`.
pub fn compute_feedback(correct: bool, r_star: f64, penalties: &[f64]) -> Vec<f64> {
    let base = if correct { r_star } else { 0.0 };
    penalties.iter().map(|p| base - p).collect()
}

/// Everything the reward channel produced for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardRecord {
    pub penalties: Vec<f64>,
    pub reward_magnitude: f64,
    pub correct: bool,
    pub step_rewards: Vec<f64>,
}

impl RewardRecord {
    pub fn new(correct: bool, reward_magnitude: f64, penalties: Vec<f64>) -> Self {
        let step_rewards = compute_feedback(correct, reward_magnitude, &penalties);
        RewardRecord { penalties, reward_magnitude, correct, step_rewards }
    }

    /// The defining arithmetic identity, bitwise.
    pub fn holds_identity(&self) -> bool {
        self.step_rewards.len() == self.penalties.len()
            && self
                .step_rewards
                .iter()
                .zip(&self.penalties)
                .all(|(r, p)| *r == (if self.correct { self.reward_magnitude } else { 0.0 }) - p)
    }
}
