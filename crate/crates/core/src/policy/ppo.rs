//! Clipped-surrogate policy optimization over collected episode trajectories.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::optim::AdaMax;
use crate::policy::ppm::{
    entropy_graph, log_prob_graph, policy_core_graph, ActionChoice, PolicyParams,
    PolicyTensorVars,
};
use ndarray::Array2;

pub const VALUE_LOSS_COEF: f64 = 0.5;
pub const ENTROPY_COEF: f64 = 0.01;

/// One policy decision and its outcome.
#[derive(Clone, Debug)]
pub struct TrajectoryStep {
    /// Token that drove the decision (detached from any training graph).
    pub token_input: Vec<f64>,
    pub choice: ActionChoice,
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    pub ret: f64,
    pub advantage: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EpisodeTrajectory {
    pub steps: Vec<TrajectoryStep>,
}

/// Trajectories for one PPO batch. Episodes append complete; returns and
/// advantages are computed once over the finished batch, before any update.
#[derive(Clone, Debug, Default)]
pub struct TrajectoryBuffer {
    pub episodes: Vec<EpisodeTrajectory>,
    finalized: bool,
}

impl TrajectoryBuffer {
    pub fn new() -> Self {
        TrajectoryBuffer::default()
    }

    pub fn push_episode(&mut self, episode: EpisodeTrajectory) {
        debug_assert!(!self.finalized, "buffer already finalized");
        if !episode.steps.is_empty() {
            self.episodes.push(episode);
        }
    }

    pub fn num_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn num_steps(&self) -> usize {
        self.episodes.iter().map(|e| e.steps.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn clear(&mut self) {
        self.episodes.clear();
        self.finalized = false;
    }

    pub fn mean_reward(&self) -> f64 {
        let n = self.num_steps();
        if n == 0 {
            return 0.0;
        }
        self.episodes.iter().flat_map(|e| e.steps.iter().map(|s| s.reward)).sum::<f64>() / n as f64
    }
}

/// Fill in discounted returns per episode, then advantages as
/// return-minus-value normalized to zero mean and unit deviation across the
/// whole batch (deviation floored at 1e-8).
pub fn compute_returns_and_advantages(buffer: &mut TrajectoryBuffer, gamma: f64) {
    for episode in &mut buffer.episodes {
        let mut running = 0.0;
        for step in episode.steps.iter_mut().rev() {
            running = step.reward + gamma * running;
            step.ret = running;
        }
        for step in &mut episode.steps {
            step.advantage = step.ret - step.value;
        }
    }
    let n = buffer.num_steps();
    if n > 0 {
        let mean = buffer
            .episodes
            .iter()
            .flat_map(|e| e.steps.iter().map(|s| s.advantage))
            .sum::<f64>()
            / n as f64;
        let var = buffer
            .episodes
            .iter()
            .flat_map(|e| e.steps.iter().map(|s| (s.advantage - mean).powi(2)))
            .sum::<f64>()
            / n as f64;
        let sd = var.sqrt().max(1e-8);
        for episode in &mut buffer.episodes {
            for step in &mut episode.steps {
                step.advantage = (step.advantage - mean) / sd;
            }
        }
    }
    buffer.finalized = true;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PpoEpochStats {
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    /// Mean clipped surrogate objective (pre-negation).
    pub surrogate: f64,
    /// Mean squared value error (before its 0.5 coefficient).
    pub value_loss: f64,
    pub entropy: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug, Default)]
pub struct PpoStats {
    pub epochs: Vec<PpoEpochStats>,
}

fn row_const(values: &[f64]) -> Var {
    Var::constant(Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
}

/// Build the PPO loss for one pass over the buffer: clipped surrogate plus
/// value loss and entropy bonus, with the recurrent state replayed from zero
/// over each episode's stored tokens.
pub fn ppo_loss_graph(
    vars: &PolicyTensorVars,
    params: &PolicyParams,
    buffer: &TrajectoryBuffer,
    clip_eps: f64,
) -> (Var, PpoEpochStats) {
    assert!(buffer.is_finalized(), "returns/advantages must be computed first");
    let hidden_width = params.hidden_width();
    let mut surrogate_sum: Option<Var> = None;
    let mut value_sum: Option<Var> = None;
    let mut entropy_sum: Option<Var> = None;
    let mut ratio_total = 0.0;
    let mut clipped_count = 0usize;
    let add_to = |acc: &mut Option<Var>, term: Var| {
        *acc = Some(match acc.take() {
            Some(a) => a.add(&term),
            None => term,
        });
    };
    for episode in &buffer.episodes {
        let mut hidden = Var::constant(Array2::zeros((1, hidden_width)));
        for step in &episode.steps {
            let token = row_const(&step.token_input);
            let (new_hidden, act_out, value) = policy_core_graph(vars, &hidden, &token);
            hidden = new_hidden;
            let log_prob = log_prob_graph(params.mode, params.sigma, &act_out, &step.choice);
            let ratio = log_prob.add_scalar(-step.log_prob).exp_();
            let ratio_value = ratio.scalar_value();
            ratio_total += ratio_value;
            if ratio_value < 1.0 - clip_eps || ratio_value > 1.0 + clip_eps {
                clipped_count += 1;
            }
            let unclipped = ratio.scale(step.advantage);
            let clipped = ratio.clamp_(1.0 - clip_eps, 1.0 + clip_eps).scale(step.advantage);
            add_to(&mut surrogate_sum, unclipped.min_pair(&clipped));
            let err = value.add_scalar(-step.ret);
            add_to(&mut value_sum, err.mul(&err));
            add_to(&mut entropy_sum, entropy_graph(params.mode, params.sigma, &act_out));
        }
    }
    let n = buffer.num_steps().max(1) as f64;
    let surrogate = surrogate_sum.expect("non-empty buffer").scale(1.0 / n);
    let value_loss = value_sum.expect("non-empty buffer").scale(1.0 / n);
    let entropy = entropy_sum.expect("non-empty buffer").scale(1.0 / n);
    let loss = surrogate
        .neg()
        .add(&value_loss.scale(VALUE_LOSS_COEF))
        .add(&entropy.scale(-ENTROPY_COEF));
    let stats = PpoEpochStats {
        mean_ratio: ratio_total / n,
        clip_fraction: clipped_count as f64 / n,
        surrogate: surrogate.scalar_value(),
        value_loss: value_loss.scalar_value(),
        entropy: entropy.scalar_value(),
        total_loss: loss.scalar_value(),
    };
    (loss, stats)
}

/// Run `update_epochs` full-batch passes of the clipped-surrogate objective,
/// stepping the policy optimizer after each pass.
pub fn ppo_update(
    params: &mut PolicyParams,
    optimizer: &mut AdaMax,
    buffer: &TrajectoryBuffer,
    clip_eps: f64,
    update_epochs: usize,
) -> Result<PpoStats> {
    if !(0.0..1.0).contains(&clip_eps) || clip_eps == 0.0 {
        return Err(Error::InvalidConfig(format!("clip_eps must be in (0, 1), got {clip_eps}")));
    }
    if buffer.is_empty() {
        return Err(Error::InvalidConfig("PPO update on an empty buffer".into()));
    }
    if !buffer.is_finalized() {
        return Err(Error::InvalidConfig("returns/advantages not computed".into()));
    }
    let mut stats = PpoStats::default();
    for _ in 0..update_epochs {
        let vars = params.tensors.vars();
        let (loss, epoch_stats) = ppo_loss_graph(&vars, params, buffer, clip_eps);
        if !epoch_stats.total_loss.is_finite() {
            return Err(Error::PpoDivergence(format!(
                "non-finite loss {}",
                epoch_stats.total_loss
            )));
        }
        loss.backward();
        let grads = vars.grads();
        if !grads.is_finite() {
            return Err(Error::PpoDivergence("non-finite gradient".into()));
        }
        optimizer.advance();
        params
            .tensors
            .for_each_pair(&grads, &mut |name, p, g| optimizer.update(&format!("policy.{name}"), p, g));
        stats.epochs.push(epoch_stats);
    }
    Ok(stats)
}
