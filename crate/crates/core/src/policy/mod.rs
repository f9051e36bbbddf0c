//! Sampling policy: the recurrent proximal policy module, reward shaping,
//! and clipped-surrogate optimization.

pub mod ppm;
pub mod ppo;
pub mod reward;

pub use ppm::{
    entropy_graph, log_prob_graph, policy_core_graph, policy_step, policy_step_deterministic,
    ActionChoice, ActionMode, PolicyAction, PolicyParams, PolicyTensorVars, PolicyTensors,
};
pub use ppo::{
    compute_returns_and_advantages, ppo_loss_graph, ppo_update, EpisodeTrajectory, PpoEpochStats,
    PpoStats, TrajectoryBuffer, TrajectoryStep, ENTROPY_COEF, VALUE_LOSS_COEF,
};
pub use reward::{compute_feedback, compute_penalties, RewardRecord};
