//! Proximal policy module: a single-layer recurrent core over step tokens
//! with an action head (Gaussian query vector or categorical coefficient
//! choice) and a scalar value head.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::param_struct;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionMode {
    /// Sample a query vector from an isotropic Gaussian around the head's
    /// mean output; used by the similarity-driven schemes.
    QueryGaussian,
    /// Sample an index into the interpolation-coefficient grid.
    BetaCategorical,
}

param_struct! {
    pub struct PolicyTensors / PolicyTensorVars {
        rnn_wx, rnn_wh, rnn_b,
        act_w1, act_b1, act_w2, act_b2,
        val_w1, val_b1, val_w2, val_b2,
    }
}

#[derive(Clone, Debug)]
pub struct PolicyParams {
    pub mode: ActionMode,
    pub sigma: f64,
    pub tensors: PolicyTensors,
}

impl PolicyParams {
    pub fn init(
        input_dim: usize,
        hidden: usize,
        action_dim: usize,
        mode: ActionMode,
        sigma: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::InvalidConfig("policy hidden width must be >= 1".into()));
        }
        if sigma <= 0.0 {
            return Err(Error::InvalidConfig("exploration sigma must be > 0".into()));
        }
        if action_dim == 0 {
            return Err(Error::InvalidConfig("action dim must be >= 1".into()));
        }
        use crate::params::{xavier, zeros};
        Ok(PolicyParams {
            mode,
            sigma,
            tensors: PolicyTensors {
                rnn_wx: xavier(input_dim, hidden, rng),
                rnn_wh: xavier(hidden, hidden, rng),
                rnn_b: zeros(1, hidden),
                act_w1: xavier(hidden, hidden, rng),
                act_b1: zeros(1, hidden),
                act_w2: xavier(hidden, action_dim, rng),
                act_b2: zeros(1, action_dim),
                val_w1: xavier(hidden, hidden, rng),
                val_b1: zeros(1, hidden),
                val_w2: xavier(hidden, 1, rng),
                val_b2: zeros(1, 1),
            },
        })
    }

    pub fn hidden_width(&self) -> usize {
        self.tensors.rnn_wh.dim().0
    }

    pub fn input_dim(&self) -> usize {
        self.tensors.rnn_wx.dim().0
    }

    pub fn action_dim(&self) -> usize {
        self.tensors.act_w2.dim().1
    }
}

/// The sampled decision for one step.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionChoice {
    Query(Vec<f64>),
    BetaIndex(usize),
}

#[derive(Clone, Debug)]
pub struct PolicyAction {
    pub choice: ActionChoice,
    pub log_prob: f64,
    pub value_estimate: f64,
}

/// One recurrent step on the graph: returns (new hidden, action-head output,
/// value estimate). The action-head output is the Gaussian mean or the
/// categorical logits depending on the mode.
pub fn policy_core_graph(vars: &PolicyTensorVars, hidden: &Var, token: &Var) -> (Var, Var, Var) {
    let h = token
        .matmul(&vars.rnn_wx)
        .add(&hidden.matmul(&vars.rnn_wh))
        .add(&vars.rnn_b)
        .tanh_();
    let act_hidden = h.matmul(&vars.act_w1).add(&vars.act_b1).tanh_();
    let act_out = act_hidden.matmul(&vars.act_w2).add(&vars.act_b2);
    let val_hidden = h.matmul(&vars.val_w1).add(&vars.val_b1).tanh_();
    let value = val_hidden.matmul(&vars.val_w2).add(&vars.val_b2);
    (h, act_out, value)
}

/// Log-likelihood of a recorded action under the current head output.
pub fn log_prob_graph(mode: ActionMode, sigma: f64, act_out: &Var, choice: &ActionChoice) -> Var {
    match (mode, choice) {
        (ActionMode::QueryGaussian, ActionChoice::Query(q)) => {
            let d = q.len() as f64;
            let diff = Var::row(q).sub(act_out);
            diff.mul(&diff)
                .sum()
                .scale(-1.0 / (2.0 * sigma * sigma))
                .add_scalar(-0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln())
        }
        (ActionMode::BetaCategorical, ActionChoice::BetaIndex(i)) => {
            act_out.log_softmax_rows().get(0, *i)
        }
        _ => panic!("action choice does not match policy mode"),
    }
}

/// Differential/Shannon entropy of the action distribution.
pub fn entropy_graph(mode: ActionMode, sigma: f64, act_out: &Var) -> Var {
    match mode {
        ActionMode::QueryGaussian => {
            let d = act_out.shape().1 as f64;
            Var::scalar(0.5 * d * (1.0 + (2.0 * std::f64::consts::PI * sigma * sigma).ln()))
        }
        ActionMode::BetaCategorical => {
            let p = act_out.softmax_rows();
            let logp = act_out.log_softmax_rows();
            p.mul(&logp).sum().neg()
        }
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::PolicyDivergence("non-finite activation".into()));
    }
    Ok(())
}

fn forward_values(params: &PolicyParams, hidden: &[f64], token: &[f64]) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let vars = params.tensors.vars();
    let h_in = Var::constant(Array2::from_shape_vec((1, hidden.len()), hidden.to_vec()).unwrap());
    let t_in = Var::constant(Array2::from_shape_vec((1, token.len()), token.to_vec()).unwrap());
    let (h, act_out, value) = policy_core_graph(&vars, &h_in, &t_in);
    let h: Vec<f64> = h.to_array().row(0).to_vec();
    let act: Vec<f64> = act_out.to_array().row(0).to_vec();
    let v = value.scalar_value();
    check_finite(&h)?;
    check_finite(&act)?;
    check_finite(&[v])?;
    Ok((h, act, v))
}

fn gaussian_log_prob(query: &[f64], mean: &[f64], sigma: f64) -> f64 {
    let d = query.len() as f64;
    let sq: f64 = query.iter().zip(mean).map(|(q, m)| (q - m) * (q - m)).sum();
    -sq / (2.0 * sigma * sigma) - 0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Advance the recurrent state over the incoming token and sample an action.
/// Deterministic given the RNG state; value estimation never touches the RNG,
/// so the sampled action is independent of the value head.
pub fn policy_step(
    params: &PolicyParams,
    hidden: &[f64],
    token: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<(PolicyAction, Vec<f64>)> {
    let (h, act, value) = forward_values(params, hidden, token)?;
    let action = match params.mode {
        ActionMode::QueryGaussian => {
            let query: Vec<f64> = act
                .iter()
                .map(|m| m + params.sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                .collect();
            let log_prob = gaussian_log_prob(&query, &act, params.sigma);
            PolicyAction { choice: ActionChoice::Query(query), log_prob, value_estimate: value }
        }
        ActionMode::BetaCategorical => {
            let probs = softmax(&act);
            let u: f64 = rng.random_range(0.0..1.0);
            let mut acc = 0.0;
            let mut idx = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            PolicyAction {
                choice: ActionChoice::BetaIndex(idx),
                log_prob: probs[idx].ln(),
                value_estimate: value,
            }
        }
    };
    Ok((action, h))
}

/// Mode action without sampling: the Gaussian mean, or the argmax coefficient
/// (ties to the lower index). Used at evaluation time.
pub fn policy_step_deterministic(
    params: &PolicyParams,
    hidden: &[f64],
    token: &[f64],
) -> Result<(PolicyAction, Vec<f64>)> {
    let (h, act, value) = forward_values(params, hidden, token)?;
    let action = match params.mode {
        ActionMode::QueryGaussian => {
            let log_prob = gaussian_log_prob(&act, &act, params.sigma);
            PolicyAction { choice: ActionChoice::Query(act), log_prob, value_estimate: value }
        }
        ActionMode::BetaCategorical => {
            let probs = softmax(&act);
            let mut idx = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[idx] {
                    idx = i;
                }
            }
            PolicyAction {
                choice: ActionChoice::BetaIndex(idx),
                log_prob: probs[idx].ln(),
                value_estimate: value,
            }
        }
    };
    Ok((action, h))
}
