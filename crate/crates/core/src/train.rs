//! Training orchestration: per-bag episodes driving the sampler, fusion, and
//! classification modules; joint loss updates; reward collection and PPO
//! updates of the sampling policy; checkpointing; and evaluation with
//! attention export.
//!
//! The training loop is single-threaded and fully deterministic given the
//! configured seed: every random draw comes from a stream derived from
//! `(seed, purpose, epoch, bag)`. Evaluation fans out across bags, capped by
//! `PAMIL_THREADS`; per-bag results are independent, so the fan-out cannot
//! change any reported number.

use crate::checkpoint::{checkpoint_load, checkpoint_save, CheckpointData};
use crate::config::{version_string, ModelConfig, RunConfig};
use crate::data::manifest::Split;
use crate::data::{BagRecord, DatasetManifest};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::{compute_metrics, BagOutcome, MetricsReport};
use crate::nn::AttentionTrace;
use crate::optim::AdaMax;
use crate::policy::{
    compute_penalties, compute_returns_and_advantages, policy_step, policy_step_deterministic,
    ppo_update, ActionChoice, ActionMode, EpisodeTrajectory, PolicyParams, RewardRecord,
    TrajectoryBuffer, TrajectoryStep,
};
use crate::rng;
use crate::sampler::{create_sampler, ActionSpace, InstanceSampler, SamplerAction};
use crate::schedule::{lambda_at, LossBreakdown};
use crate::sffr::{mha_fuse_graph, sia_loss_graph, trm_encode_graph, SffrParams, SffrVars, StepToken};
use crate::tcm::{
    classify_graph, fuse_decision, stl_loss_graph, wsl_loss_graph, TcmForward, TcmParams, TcmVars,
};
use ndarray::Array2;
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Live training state; everything a checkpoint captures.
pub struct TrainerState {
    pub config: RunConfig,
    pub sffr: SffrParams,
    pub tcm: TcmParams,
    pub policy: Option<PolicyParams>,
    pub sftc_opt: AdaMax,
    pub policy_opt: AdaMax,
    pub epochs_done: usize,
    pub best_val_auc: f64,
}

impl TrainerState {
    pub fn new(config: &RunConfig) -> Result<Self> {
        Self::new_with_capacity(config, config.model.group_size)
    }

    /// Build a fresh state whose positional table holds up to
    /// `positional_capacity` rows. Fixed grouping schemes can emit groups
    /// larger than the configured group size, so the trainer derives the
    /// capacity from the dataset before initializing parameters.
    pub fn new_with_capacity(config: &RunConfig, positional_capacity: usize) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let mut init_rng = rng::stream(seed, "param-init");
        let mut sffr = SffrParams::init(
            config.model.dim,
            config.model.heads,
            positional_capacity.max(config.model.group_size),
            &mut init_rng,
        )?;
        sffr.n_heads = config.model.heads;
        let mut tcm = TcmParams::init(config.model.dim, config.model.heads, &mut init_rng)?;
        tcm.aggregation = config.model.aggregation;
        let sampler_cfg = config.sampler_config();
        let policy = if sampler_cfg.scheme.is_policy_driven() {
            let (mode, action_dim) = match create_sampler(&sampler_cfg)?.action_space() {
                ActionSpace::QueryGaussian => (ActionMode::QueryGaussian, config.model.dim),
                ActionSpace::BetaCategorical => {
                    (ActionMode::BetaCategorical, config.action.beta_grid.len())
                }
                ActionSpace::NoPolicy => unreachable!("policy-driven scheme"),
            };
            Some(PolicyParams::init(
                config.model.dim,
                config.model.policy_hidden,
                action_dim,
                mode,
                config.action.sigma,
                &mut init_rng,
            )?)
        } else {
            None
        };
        Ok(TrainerState {
            config: config.clone(),
            sffr,
            tcm,
            policy,
            sftc_opt: AdaMax::new(config.optim.lr, config.optim.weight_decay),
            policy_opt: AdaMax::new(config.ppo.lr, 0.0),
            epochs_done: 0,
            best_val_auc: f64::NEG_INFINITY,
        })
    }

    fn collect_params(&self) -> BTreeMap<String, Array2<f64>> {
        let mut table = BTreeMap::new();
        self.sffr.visit(&mut |n, a| {
            table.insert(format!("sffr.{n}"), a.clone());
        });
        self.tcm.visit(&mut |n, a| {
            table.insert(format!("tcm.{n}"), a.clone());
        });
        if let Some(policy) = &self.policy {
            policy.tensors.visit(&mut |n, a| {
                table.insert(format!("policy.{n}"), a.clone());
            });
        }
        table
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        let mut moments_m = BTreeMap::new();
        let mut moments_u = BTreeMap::new();
        for (k, m, u) in self.sftc_opt.state().chain(self.policy_opt.state()) {
            moments_m.insert(k.to_string(), m.clone());
            moments_u.insert(k.to_string(), u.clone());
        }
        CheckpointData {
            config_hash: self.config.hash(),
            config_json: self.config.to_json(),
            epoch: self.epochs_done as u32,
            master_seed: self.config.train.seed,
            best_val_auc: self.best_val_auc,
            sftc_opt_step: self.sftc_opt.step_count(),
            policy_opt_step: self.policy_opt.step_count(),
            params: self.collect_params(),
            moments_m,
            moments_u,
        }
    }

    /// Rebuild a state from checkpoint data under `config`. Every tensor in
    /// the freshly initialized state must be present with a matching shape.
    pub fn from_checkpoint(config: &RunConfig, data: &CheckpointData) -> Result<Self> {
        if data.config_hash != config.hash() {
            eprintln!(
                "warning: checkpoint config hash {:016x} differs from the active config {:016x}; proceeding",
                data.config_hash,
                config.hash()
            );
        }
        let mut state = TrainerState::new(config)?;
        let restore = |prefix: &str, name: &str, tensor: &mut Array2<f64>| -> Result<()> {
            let key = format!("{prefix}.{name}");
            let saved = data
                .params
                .get(&key)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {key}")))?;
            if saved.dim() != tensor.dim() {
                return Err(Error::CorruptCheckpoint(format!(
                    "tensor {key}: shape {:?} expected {:?}",
                    saved.dim(),
                    tensor.dim()
                )));
            }
            *tensor = saved.clone();
            Ok(())
        };
        let mut failure = None;
        state.sffr.visit_mut(&mut |n, a| {
            if failure.is_none() {
                failure = restore("sffr", n, a).err();
            }
        });
        state.tcm.visit_mut(&mut |n, a| {
            if failure.is_none() {
                failure = restore("tcm", n, a).err();
            }
        });
        if let Some(policy) = &mut state.policy {
            policy.tensors.visit_mut(&mut |n, a| {
                if failure.is_none() {
                    failure = restore("policy", n, a).err();
                }
            });
        }
        if let Some(err) = failure {
            return Err(err);
        }
        let split_moments = |prefix: &str| {
            data.moments_m
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, m)| {
                    (k.clone(), m.clone(), data.moments_u.get(k).cloned().unwrap_or_else(|| Array2::zeros(m.dim())))
                })
                .collect::<Vec<_>>()
        };
        state.sftc_opt.restore(
            data.sftc_opt_step,
            data.moments_m
                .iter()
                .filter(|(k, _)| !k.starts_with("policy."))
                .map(|(k, m)| {
                    (k.clone(), m.clone(), data.moments_u.get(k).cloned().unwrap_or_else(|| Array2::zeros(m.dim())))
                })
                .collect(),
        );
        state.policy_opt.restore(data.policy_opt_step, split_moments("policy."));
        state.epochs_done = data.epoch as usize;
        state.best_val_auc = data.best_val_auc;
        Ok(state)
    }
}

/// Largest group the configured scheme can emit over bags of the given
/// sizes. Clustering puts no bound on a cluster's size, so it needs capacity
/// for a whole bag; the near-equal random partition needs the ceiling share;
/// everything else is bounded by the configured group size.
pub fn positional_capacity(config: &RunConfig, bag_sizes: impl Iterator<Item = usize>) -> usize {
    use crate::sampler::SchemeKind;
    let max_bag = bag_sizes.max().unwrap_or(0);
    let needed = match config.sampler.scheme {
        SchemeKind::Kmeans => max_bag,
        SchemeKind::RandomGroup => max_bag.div_ceil(config.sampler.n_groups.max(1)),
        _ => config.model.group_size,
    };
    needed.max(config.model.group_size)
}

/// Everything one episode forward pass produced.
struct EpisodeRun {
    tokens: Vec<crate::autodiff::Var>,
    step_tokens: Vec<StepToken>,
    tcm_out: TcmForward,
    trajectory: Vec<TrajectoryStep>,
    group_indices: Vec<Vec<usize>>,
    trm_traces: Vec<AttentionTrace>,
}

#[allow(clippy::too_many_arguments)]
fn run_episode(
    sffr_vars: &SffrVars,
    tcm_vars: &TcmVars,
    model: &ModelConfig,
    policy: Option<&PolicyParams>,
    sampler: &dyn InstanceSampler,
    bag: &BagRecord,
    episode_seed: u64,
    stochastic: bool,
) -> Result<EpisodeRun> {
    let heads = model.heads;
    let (mut state, mut group) = sampler.start(bag, episode_seed)?;
    let mut policy_rng = rng::stream(episode_seed, "policy-actions");
    let mut hidden = vec![0.0; policy.map(|p| p.hidden_width()).unwrap_or(1)];
    let mut tokens = Vec::new();
    let mut step_tokens: Vec<StepToken> = Vec::new();
    let mut trajectory = Vec::new();
    let mut group_indices = Vec::new();
    let mut trm_traces = Vec::new();
    let mut u_prev = sffr_vars.init_token.clone();
    loop {
        group_indices.push(group.indices.clone());
        let (trm_token, trm_trace) = trm_encode_graph(sffr_vars, heads, &u_prev, &group.features)?;
        trm_traces.push(trm_trace);
        let (fused, _) = mha_fuse_graph(sffr_vars, heads, &trm_token, &tokens);
        if !fused.is_finite() {
            return Err(Error::PolicyDivergence(format!(
                "non-finite step token in bag {}",
                bag.bag_id
            )));
        }
        let token_values: Vec<f64> = fused.to_array().row(0).to_vec();
        let step_token = StepToken { vector: token_values.clone(), step_index: step_tokens.len() + 1 };
        state.past_tokens.push(step_token.clone());
        step_tokens.push(step_token);
        tokens.push(fused.clone());
        u_prev = fused;
        if state.is_exhausted() {
            break;
        }
        let action = match sampler.action_space() {
            ActionSpace::NoPolicy => SamplerAction::None,
            space => {
                let params = policy.ok_or_else(|| {
                    Error::InvalidConfig("policy-driven scheme without a policy".into())
                })?;
                let (act, new_hidden) = if stochastic {
                    policy_step(params, &hidden, &token_values, &mut policy_rng)?
                } else {
                    policy_step_deterministic(params, &hidden, &token_values)?
                };
                hidden = new_hidden;
                let sampler_action = match (&act.choice, space) {
                    (ActionChoice::Query(q), ActionSpace::QueryGaussian) => {
                        SamplerAction::Query(q.clone())
                    }
                    (ActionChoice::BetaIndex(i), ActionSpace::BetaCategorical) => {
                        SamplerAction::BetaIndex(*i)
                    }
                    _ => return Err(Error::InvalidConfig("action/scheme mismatch".into())),
                };
                if stochastic {
                    trajectory.push(TrajectoryStep {
                        token_input: token_values.clone(),
                        choice: act.choice,
                        log_prob: act.log_prob,
                        value: act.value_estimate,
                        reward: 0.0,
                        ret: 0.0,
                        advantage: 0.0,
                    });
                }
                sampler_action
            }
        };
        group = sampler.next_group(&mut state, &action)?;
    }
    let tcm_out = classify_graph(tcm_vars, heads, model.aggregation, &tokens)?;
    Ok(EpisodeRun { tokens, step_tokens, tcm_out, trajectory, group_indices, trm_traces })
}

/// Outcome of one training bag.
struct TrainBagResult {
    breakdown: LossBreakdown,
    trajectory: Option<EpisodeTrajectory>,
}

fn train_bag(
    state: &mut TrainerState,
    sampler: &dyn InstanceSampler,
    bag: &BagRecord,
    epoch: usize,
    bag_index: usize,
    lambdas: (f64, f64),
) -> Result<TrainBagResult> {
    let episode_seed = rng::mix_u64(
        rng::mix_u64(rng::mix_str(state.config.train.seed, "train-episode"), epoch as u64),
        bag_index as u64,
    );
    let sffr_vars = state.sffr.vars();
    let tcm_vars = state.tcm.vars();
    let run = run_episode(
        &sffr_vars,
        &tcm_vars,
        &state.config.model,
        state.policy.as_ref(),
        sampler,
        bag,
        episode_seed,
        true,
    )?;
    let (lambda_stl, lambda_sia) = lambdas;
    let wsl = wsl_loss_graph(&run.tcm_out.score, bag.label);
    let stl = stl_loss_graph(&run.tcm_out.step_scores, bag.label);
    let sia = sia_loss_graph(&sffr_vars, &run.tokens);
    let breakdown = LossBreakdown::new(
        wsl.scalar_value(),
        stl.scalar_value(),
        sia.scalar_value(),
        lambda_stl,
        lambda_sia,
    );
    if !breakdown.total.is_finite() {
        return Err(Error::PolicyDivergence(format!(
            "non-finite loss on bag {}",
            bag.bag_id
        )));
    }
    let total = wsl.add(&stl.scale(lambda_stl)).add(&sia.scale(lambda_sia));
    total.backward();
    let sffr_grads = sffr_vars.grads(state.config.model.heads);
    let tcm_grads = tcm_vars.grads(state.config.model.heads, state.config.model.aggregation);
    if !sffr_grads.is_finite() || !tcm_grads.is_finite() {
        return Err(Error::PolicyDivergence(format!(
            "non-finite gradient on bag {}",
            bag.bag_id
        )));
    }
    state.sftc_opt.advance();
    {
        let opt = &mut state.sftc_opt;
        state.sffr.for_each_pair(&sffr_grads, &mut |n, p, g| {
            opt.update(&format!("sffr.{n}"), p, g);
        });
        state.tcm.for_each_pair(&tcm_grads, &mut |n, p, g| {
            opt.update(&format!("tcm.{n}"), p, g);
        });
    }

    // Reward channel, fed back to the policy through the trajectory.
    let trajectory = if run.trajectory.is_empty() {
        None
    } else {
        let score = run.tcm_out.score.scalar_value();
        let correct = (score >= crate::metrics::DECISION_THRESHOLD) == (bag.label == 1);
        let h_cls: Vec<f64> = run.tcm_out.cls_embedding.to_array().row(0).to_vec();
        let penalties = if state.config.reward.use_penalty {
            compute_penalties(&h_cls, &run.step_tokens)
        } else {
            vec![0.0; run.step_tokens.len()]
        };
        let r_star = if state.config.reward.use_reward { state.config.reward.r_star } else { 0.0 };
        let record = RewardRecord::new(correct, r_star, penalties);
        let mut steps = run.trajectory;
        for (k, step) in steps.iter_mut().enumerate() {
            // The k-th recorded action selected the group encoded at step
            // k + 2 (1-based); it earns that step's feedback.
            step.reward = record.step_rewards[k + 1];
        }
        Some(EpisodeTrajectory { steps })
    };
    Ok(TrainBagResult { breakdown, trajectory })
}

/// One evaluated bag plus its per-instance attention profile.
#[derive(Clone, Debug)]
pub struct EvalBagResult {
    pub outcome: BagOutcome,
    /// `(instance_index, attention_score)`, normalized to sum to one.
    pub attention: Vec<(usize, f64)>,
}

fn instance_attention(
    num_instances: usize,
    group_indices: &[Vec<usize>],
    trm_traces: &[AttentionTrace],
    cls_trace: &AttentionTrace,
) -> Vec<(usize, f64)> {
    let cls_weights = cls_trace.mean_weights();
    let mut scores = vec![0.0f64; num_instances];
    for (t, (indices, trace)) in group_indices.iter().zip(trm_traces).enumerate() {
        let token_weight = cls_weights[(0, t + 1)];
        let trm_weights = trace.mean_weights();
        for (row, &instance) in indices.iter().enumerate() {
            scores[instance] = token_weight * trm_weights[(0, row + 1)];
        }
    }
    let total: f64 = scores.iter().sum();
    if total > 0.0 {
        scores.iter_mut().for_each(|s| *s /= total);
    }
    (0..num_instances).zip(scores).collect()
}

/// Evaluate one bag with the deterministic policy.
pub fn evaluate_bag(
    sffr: &SffrParams,
    tcm: &TcmParams,
    policy: Option<&PolicyParams>,
    config: &RunConfig,
    sampler: &dyn InstanceSampler,
    bag: &BagRecord,
) -> Result<EvalBagResult> {
    let episode_seed = rng::mix_str(config.train.seed, &format!("eval:{}", bag.bag_id));
    let sffr_vars = sffr.const_vars();
    let tcm_vars = tcm.const_vars();
    let run = run_episode(
        &sffr_vars,
        &tcm_vars,
        &config.model,
        policy,
        sampler,
        bag,
        episode_seed,
        false,
    )?;
    let score = run.tcm_out.score.scalar_value();
    let step_scores: Vec<f64> = run.tcm_out.step_scores.iter().map(|s| s.scalar_value()).collect();
    let outcome = BagOutcome {
        bag_id: bag.bag_id.clone(),
        label: bag.label,
        score,
        fused_score: fuse_decision(&step_scores, score, score >= crate::metrics::DECISION_THRESHOLD),
        fused_diagnostic: fuse_decision(&step_scores, score, bag.label == 1),
        num_steps: run.step_tokens.len(),
    };
    let attention = instance_attention(
        bag.num_instances(),
        &run.group_indices,
        &run.trm_traces,
        &run.tcm_out.attention,
    );
    Ok(EvalBagResult { outcome, attention })
}

fn eval_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(value) = std::env::var("PAMIL_THREADS") {
        match value.parse::<usize>() {
            Ok(n) if n >= 1 => builder = builder.num_threads(n),
            _ => {
                return Err(Error::InvalidConfig(format!(
                    "PAMIL_THREADS must be a positive integer, got `{value}`"
                )))
            }
        }
    }
    builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

/// Evaluate a set of bags in parallel (bounded by `PAMIL_THREADS`); results
/// come back in input order regardless of scheduling.
pub fn evaluate_bags(
    sffr: &SffrParams,
    tcm: &TcmParams,
    policy: Option<&PolicyParams>,
    config: &RunConfig,
    bags: &[BagRecord],
) -> Result<Vec<EvalBagResult>> {
    let sampler_cfg = config.sampler_config();
    let pool = eval_pool()?;
    pool.install(|| {
        bags.par_iter()
            .map(|bag| {
                let sampler = create_sampler(&sampler_cfg)?;
                evaluate_bag(sffr, tcm, policy, config, sampler.as_ref(), bag)
            })
            .collect()
    })
}

pub fn metrics_from_outcomes(outcomes: &[BagOutcome]) -> MetricsReport {
    let labels: Vec<u8> = outcomes.iter().map(|o| o.label).collect();
    let scores: Vec<f64> = outcomes.iter().map(|o| o.score).collect();
    compute_metrics(&labels, &scores)
}

/// Per-epoch log row.
#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub wsl: f64,
    pub stl: f64,
    pub sia: f64,
    pub total: f64,
    pub lambda_stl: f64,
    pub lambda_sia: f64,
    pub ppo_mean_ratio: f64,
    pub ppo_clip_fraction: f64,
    pub val: MetricsReport,
    pub test: Option<MetricsReport>,
}

pub struct TrainOutputs {
    pub best_epoch: usize,
    pub best_val: MetricsReport,
    pub epochs: Vec<EpochRow>,
    pub checkpoint_path: PathBuf,
    pub last_checkpoint_path: PathBuf,
    pub epochs_csv_path: PathBuf,
}

fn epochs_csv(rows: &[EpochRow], track_test: bool) -> String {
    let mut out = String::from(
        "epoch,wsl,stl,sia,total,lambda_stl,lambda_sia,ppo_mean_ratio,ppo_clip_fraction,\
         val_accuracy,val_precision,val_recall,val_f1,val_auc",
    );
    if track_test {
        out.push_str(",test_accuracy,test_auc");
    }
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            row.epoch,
            row.wsl,
            row.stl,
            row.sia,
            row.total,
            row.lambda_stl,
            row.lambda_sia,
            row.ppo_mean_ratio,
            row.ppo_clip_fraction,
            row.val.accuracy,
            row.val.precision,
            row.val.recall,
            row.val.f1,
            row.val.auc
        ));
        if track_test {
            let test = row.test.as_ref().expect("test metrics tracked");
            out.push_str(&format!(",{},{}", test.accuracy, test.auc));
        }
        out.push('\n');
    }
    out
}

fn write_metrics_json(
    path: &Path,
    config: &RunConfig,
    report: &MetricsReport,
    extra: &[(&str, serde_json::Value)],
) -> Result<()> {
    let mut doc = serde_json::json!({
        "version": version_string(),
        "config": serde_json::from_str::<serde_json::Value>(&config.to_json())?,
        "metrics": report,
    });
    for (k, v) in extra {
        doc[*k] = v.clone();
    }
    fsutil::atomic_write_str(path, &serde_json::to_string_pretty(&doc)?)
}

/// Train under `config`, writing artifacts into `out_dir`. When
/// `resume_from` names a checkpoint, training continues from its state up to
/// the configured epoch budget.
pub fn train(config: &RunConfig, out_dir: &Path, resume_from: Option<&Path>) -> Result<TrainOutputs> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let manifest_path = &config.data.manifest;
    let manifest = DatasetManifest::read_csv(manifest_path)?;
    let base_dir = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let train_bags = manifest.load_split(&base_dir, Split::Train)?;
    let val_bags = manifest.load_split(&base_dir, Split::Val)?;
    let test_bags = if config.train.track_test_metrics {
        Some(manifest.load_split(&base_dir, Split::Test)?)
    } else {
        None
    };
    for bag in train_bags.iter().chain(&val_bags) {
        if bag.feature_dim() != config.model.dim {
            return Err(Error::InvalidConfig(format!(
                "bag {} has dim {}, model expects {}",
                bag.bag_id,
                bag.feature_dim(),
                config.model.dim
            )));
        }
    }

    let mut capacity_bags: Vec<&BagRecord> = train_bags.iter().chain(&val_bags).collect();
    if let Some(bags) = &test_bags {
        capacity_bags.extend(bags.iter());
    }
    let capacity = positional_capacity(config, capacity_bags.iter().map(|b| b.num_instances()));
    let mut state = match resume_from {
        Some(path) => TrainerState::from_checkpoint(config, &checkpoint_load(path)?)?,
        None => TrainerState::new_with_capacity(config, capacity)?,
    };
    let schedule = config.loss_schedule();
    let sampler = create_sampler(&config.sampler_config())?;
    let best_path = out_dir.join("checkpoint.bin");
    let last_path = out_dir.join("checkpoint_last.bin");
    let csv_path = out_dir.join("epochs.csv");

    let mut rows: Vec<EpochRow> = Vec::new();
    let mut best_epoch = state.epochs_done;
    let mut best_val = None;

    let abort_checkpoint = |state: &TrainerState, err: Error| -> Error {
        let _ = checkpoint_save(&state.to_checkpoint(), &out_dir.join("checkpoint_aborted.bin"));
        err
    };

    for epoch in state.epochs_done..config.train.epochs {
        let lambdas = lambda_at(&schedule, epoch);
        let mut buffer = TrajectoryBuffer::new();
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut ppo_ratio_sum = 0.0;
        let mut ppo_clip_sum = 0.0;
        let mut ppo_updates = 0usize;
        let flush =
            |state: &mut TrainerState, buffer: &mut TrajectoryBuffer| -> Result<(f64, f64, usize)> {
                if buffer.is_empty() {
                    return Ok((0.0, 0.0, 0));
                }
                compute_returns_and_advantages(buffer, state.config.ppo.gamma);
                let policy = state.policy.as_mut().expect("trajectories imply a policy");
                let stats = ppo_update(
                    policy,
                    &mut state.policy_opt,
                    buffer,
                    state.config.ppo.clip_eps,
                    state.config.ppo.epochs,
                )?;
                buffer.clear();
                let n = stats.epochs.len().max(1) as f64;
                let ratio = stats.epochs.iter().map(|e| e.mean_ratio).sum::<f64>() / n;
                let clip = stats.epochs.iter().map(|e| e.clip_fraction).sum::<f64>() / n;
                Ok((ratio, clip, 1))
            };
        for (bag_index, bag) in train_bags.iter().enumerate() {
            let result = train_bag(&mut state, sampler.as_ref(), bag, epoch, bag_index, lambdas)
                .map_err(|e| abort_checkpoint(&state, e))?;
            sums.0 += result.breakdown.wsl;
            sums.1 += result.breakdown.stl;
            sums.2 += result.breakdown.sia;
            sums.3 += result.breakdown.total;
            if let Some(traj) = result.trajectory {
                buffer.push_episode(traj);
                if buffer.num_episodes() >= config.ppo.batch_episodes {
                    let (r, c, n) =
                        flush(&mut state, &mut buffer).map_err(|e| abort_checkpoint(&state, e))?;
                    ppo_ratio_sum += r;
                    ppo_clip_sum += c;
                    ppo_updates += n;
                }
            }
        }
        let (r, c, n) = flush(&mut state, &mut buffer).map_err(|e| abort_checkpoint(&state, e))?;
        ppo_ratio_sum += r;
        ppo_clip_sum += c;
        ppo_updates += n;

        let val_results = evaluate_bags(&state.sffr, &state.tcm, state.policy.as_ref(), config, &val_bags)?;
        let val_outcomes: Vec<BagOutcome> = val_results.into_iter().map(|r| r.outcome).collect();
        let val_report = metrics_from_outcomes(&val_outcomes);
        let test_report = match &test_bags {
            Some(bags) => {
                let results = evaluate_bags(&state.sffr, &state.tcm, state.policy.as_ref(), config, bags)?;
                let outcomes: Vec<BagOutcome> = results.into_iter().map(|r| r.outcome).collect();
                Some(metrics_from_outcomes(&outcomes))
            }
            None => None,
        };

        state.epochs_done = epoch + 1;
        let bag_count = train_bags.len() as f64;
        let denom = ppo_updates.max(1) as f64;
        rows.push(EpochRow {
            epoch,
            wsl: sums.0 / bag_count,
            stl: sums.1 / bag_count,
            sia: sums.2 / bag_count,
            total: sums.3 / bag_count,
            lambda_stl: lambdas.0,
            lambda_sia: lambdas.1,
            ppo_mean_ratio: ppo_ratio_sum / denom,
            ppo_clip_fraction: ppo_clip_sum / denom,
            val: val_report.clone(),
            test: test_report,
        });

        if val_report.auc > state.best_val_auc {
            state.best_val_auc = val_report.auc;
            best_epoch = epoch;
            best_val = Some(val_report);
            checkpoint_save(&state.to_checkpoint(), &best_path)?;
        }
        checkpoint_save(&state.to_checkpoint(), &last_path)?;
        fsutil::atomic_write_str(&csv_path, &epochs_csv(&rows, config.train.track_test_metrics))?;
    }

    let best_val = match best_val {
        Some(report) => report,
        // A resumed run may never improve on the loaded best; fall back to
        // the existing best checkpoint, or to the current state when none
        // was ever written into this directory.
        None => {
            let best_state = if best_path.exists() {
                TrainerState::from_checkpoint(config, &checkpoint_load(&best_path)?)?
            } else {
                checkpoint_save(&state.to_checkpoint(), &best_path)?;
                state
            };
            let results = evaluate_bags(
                &best_state.sffr,
                &best_state.tcm,
                best_state.policy.as_ref(),
                config,
                &val_bags,
            )?;
            let outcomes: Vec<BagOutcome> = results.into_iter().map(|r| r.outcome).collect();
            metrics_from_outcomes(&outcomes)
        }
    };
    write_metrics_json(
        &out_dir.join("metrics.json"),
        config,
        &best_val,
        &[("best_epoch", serde_json::json!(best_epoch)), ("split", serde_json::json!("val"))],
    )?;
    Ok(TrainOutputs {
        best_epoch,
        best_val,
        epochs: rows,
        checkpoint_path: best_path,
        last_checkpoint_path: last_path,
        epochs_csv_path: csv_path,
    })
}

fn per_bag_csv(outcomes: &[BagOutcome]) -> String {
    let mut out = String::from("bag_id,label,score,fused_score,fused_diagnostic,predicted,num_steps\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            o.bag_id,
            o.label,
            o.score,
            o.fused_score,
            o.fused_diagnostic,
            u8::from(o.score >= crate::metrics::DECISION_THRESHOLD),
            o.num_steps
        ));
    }
    out
}

/// Evaluate a checkpoint on one split of a dataset, writing `metrics.csv`,
/// `metrics.json`, `per_bag.csv`, and one attention CSV per bag.
pub fn evaluate(
    checkpoint_path: &Path,
    manifest_path: &Path,
    split: Split,
    out_dir: &Path,
) -> Result<MetricsReport> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = checkpoint_load(checkpoint_path)?;
    let config: RunConfig = serde_json::from_str(&data.config_json)?;
    let state = TrainerState::from_checkpoint(&config, &data)?;
    let manifest = DatasetManifest::read_csv(manifest_path)?;
    let base_dir = manifest_path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let bags = manifest.load_split(&base_dir, split)?;
    let results = evaluate_bags(&state.sffr, &state.tcm, state.policy.as_ref(), &config, &bags)?;
    let outcomes: Vec<BagOutcome> = results.iter().map(|r| r.outcome.clone()).collect();
    let report = metrics_from_outcomes(&outcomes);
    fsutil::atomic_write_str(&out_dir.join("per_bag.csv"), &per_bag_csv(&outcomes))?;
    for result in &results {
        let mut csv = String::from("instance_index,attention_score\n");
        for (idx, score) in &result.attention {
            csv.push_str(&format!("{idx},{score}\n"));
        }
        fsutil::atomic_write_str(
            &out_dir.join(format!("attention_{}.csv", result.outcome.bag_id)),
            &csv,
        )?;
    }
    let metrics_csv = format!(
        "split,accuracy,precision,recall,f1,auc,num_bags,num_positive\n{split},{},{},{},{},{},{},{}\n",
        report.accuracy,
        report.precision,
        report.recall,
        report.f1,
        report.auc,
        report.num_bags,
        report.num_positive
    );
    fsutil::atomic_write_str(&out_dir.join("metrics.csv"), &metrics_csv)?;
    write_metrics_json(
        &out_dir.join("metrics.json"),
        &config,
        &report,
        &[("split", serde_json::json!(split.to_string()))],
    )?;
    Ok(report)
}
