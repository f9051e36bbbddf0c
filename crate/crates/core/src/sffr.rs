//! Selection-fusion feature representation: encode each sampled group with a
//! transformer block, fuse the result with past step tokens through
//! multi-head attention, and regularize adjacent tokens with a Siamese
//! negative-cosine loss whose targets are gradient-stopped.

use crate::autodiff::{concat_rows, cosine_rows, Var};
use crate::error::{Error, Result};
use crate::nn::{
    encoder_block, mlp, multi_head_attention, Activation, AttentionParams, AttentionTrace,
    AttentionVars, EncoderBlockParams, EncoderBlockVars, MlpParams, MlpVars,
};
use crate::params::normal;
use crate::sampler::SampledGroup;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Fused representation of one sampled group, carried across episode steps.
#[derive(Clone, Debug, PartialEq)]
pub struct StepToken {
    pub vector: Vec<f64>,
    pub step_index: usize,
}

#[derive(Clone, Debug)]
pub struct SffrParams {
    pub n_heads: usize,
    /// Learned seed token standing in for the step-0 history.
    pub init_token: Array2<f64>,
    /// Learned positional rows, indexed by within-group rank; sliced, never
    /// padded, when a group is short.
    pub positional: Array2<f64>,
    pub trm: EncoderBlockParams,
    pub fuse: AttentionParams,
    /// Siamese predictor with a bottleneck hidden layer.
    pub predictor: MlpParams,
}

pub struct SffrVars {
    pub init_token: Var,
    pub positional: Var,
    pub trm: EncoderBlockVars,
    pub fuse: AttentionVars,
    pub predictor: MlpVars,
}

impl SffrParams {
    pub fn init(dim: usize, n_heads: usize, group_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim % n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {dim} must be divisible by {n_heads} heads"
            )));
        }
        if dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {dim} must be even for the predictor bottleneck"
            )));
        }
        Ok(SffrParams {
            n_heads,
            init_token: normal(1, dim, 0.02, rng),
            positional: normal(group_size, dim, 0.02, rng),
            trm: EncoderBlockParams::init(dim, rng),
            fuse: AttentionParams::init(dim, rng),
            predictor: MlpParams::init(dim, dim / 2, dim, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.init_token.dim().1
    }

    pub fn group_size(&self) -> usize {
        self.positional.dim().0
    }

    pub fn vars(&self) -> SffrVars {
        SffrVars {
            init_token: Var::param(self.init_token.clone()),
            positional: Var::param(self.positional.clone()),
            trm: self.trm.vars(),
            fuse: self.fuse.vars(),
            predictor: self.predictor.vars(),
        }
    }

    pub fn const_vars(&self) -> SffrVars {
        SffrVars {
            init_token: Var::constant(self.init_token.clone()),
            positional: Var::constant(self.positional.clone()),
            trm: self.trm.const_vars(),
            fuse: self.fuse.const_vars(),
            predictor: self.predictor.const_vars(),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f("init_token", &self.init_token);
        f("positional", &self.positional);
        self.trm.visit(&mut |n, a| f(&format!("trm.{n}"), a));
        self.fuse.visit(&mut |n, a| f(&format!("fuse.{n}"), a));
        self.predictor.visit(&mut |n, a| f(&format!("predictor.{n}"), a));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f("init_token", &mut self.init_token);
        f("positional", &mut self.positional);
        self.trm.visit_mut(&mut |n, a| f(&format!("trm.{n}"), a));
        self.fuse.visit_mut(&mut |n, a| f(&format!("fuse.{n}"), a));
        self.predictor.visit_mut(&mut |n, a| f(&format!("predictor.{n}"), a));
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn for_each_pair(
        &mut self,
        grads: &SffrParams,
        f: &mut dyn FnMut(&str, &mut Array2<f64>, &Array2<f64>),
    ) {
        f("init_token", &mut self.init_token, &grads.init_token);
        f("positional", &mut self.positional, &grads.positional);
        self.trm.for_each_pair(&grads.trm, &mut |n, p, g| f(&format!("trm.{n}"), p, g));
        self.fuse.for_each_pair(&grads.fuse, &mut |n, p, g| f(&format!("fuse.{n}"), p, g));
        self.predictor
            .for_each_pair(&grads.predictor, &mut |n, p, g| f(&format!("predictor.{n}"), p, g));
    }
}

impl SffrVars {
    pub fn grads(&self, n_heads: usize) -> SffrParams {
        SffrParams {
            n_heads,
            init_token: self.init_token.grad_or_zeros(),
            positional: self.positional.grad_or_zeros(),
            trm: self.trm.grads(),
            fuse: self.fuse.grads(),
            predictor: self.predictor.grads(),
        }
    }
}

/// Encode one group: run the encoder block over the previous step token
/// followed by the group's feature rows plus their positional rows, and read
/// the block output at the token position.
pub fn trm_encode_graph(
    vars: &SffrVars,
    n_heads: usize,
    u_prev: &Var,
    group_features: &Array2<f64>,
) -> Result<(Var, AttentionTrace)> {
    let g = group_features.dim().0;
    if g == 0 {
        return Err(Error::EmptyGroup);
    }
    let max_g = vars.positional.shape().0;
    if g > max_g {
        return Err(Error::InvalidConfig(format!(
            "group of {g} exceeds positional capacity {max_g}"
        )));
    }
    let pos = vars.positional.slice_rows(0, g);
    let instances = Var::constant(group_features.clone()).add(&pos);
    let seq = concat_rows(&[u_prev.clone(), instances]);
    let (encoded, trace) = encoder_block(&vars.trm, &seq, n_heads);
    Ok((encoded.slice_rows(0, 1), trace))
}

/// Fuse the freshly encoded token with the step-token history: attention with
/// the new token as the query over `[new token] ++ past tokens`.
pub fn mha_fuse_graph(
    vars: &SffrVars,
    n_heads: usize,
    trm_token: &Var,
    past_tokens: &[Var],
) -> (Var, AttentionTrace) {
    let keys = if past_tokens.is_empty() {
        trm_token.clone()
    } else {
        let mut parts = Vec::with_capacity(past_tokens.len() + 1);
        parts.push(trm_token.clone());
        parts.extend(past_tokens.iter().cloned());
        concat_rows(&parts)
    };
    multi_head_attention(&vars.fuse, trm_token, &keys, n_heads)
}

/// Negative cosine similarity between a prediction and a gradient-stopped
/// target, the Siamese pairing used below.
fn negative_cosine_to_stopped(prediction: &Var, target: &Var) -> Var {
    cosine_rows(prediction, &target.stop_gradient()).neg()
}

/// Siamese consistency terms given precomputed predictor outputs; exposed so
/// hand-computed prediction/token pairs can be tested directly.
pub fn sia_loss_from_predictions(predictions: &[Var], tokens: &[Var]) -> Var {
    assert_eq!(predictions.len(), tokens.len());
    let t = tokens.len();
    if t < 2 {
        return Var::scalar(0.0);
    }
    let mut total = Var::scalar(0.0);
    for i in 1..t {
        let forward = negative_cosine_to_stopped(&predictions[i], &tokens[i - 1]);
        let backward = negative_cosine_to_stopped(&predictions[i - 1], &tokens[i]);
        total = total.add(&forward.scale(0.5).add(&backward.scale(0.5)));
    }
    total.scale(1.0 / (t - 1) as f64)
}

/// Siamese loss over an episode's step tokens. The first step has no
/// predecessor and contributes no term; a single-token episode yields an
/// exact zero with zero gradient.
pub fn sia_loss_graph(vars: &SffrVars, tokens: &[Var]) -> Var {
    if tokens.len() < 2 {
        return Var::scalar(0.0);
    }
    let predictions: Vec<Var> =
        tokens.iter().map(|u| mlp(&vars.predictor, u, Activation::Gelu)).collect();
    sia_loss_from_predictions(&predictions, tokens)
}

/// Value-level encode for callers outside the training graph.
pub fn trm_encode(params: &SffrParams, u_prev: &[f64], group: &SampledGroup) -> Result<Vec<f64>> {
    let vars = params.const_vars();
    let u = Var::constant(Array2::from_shape_vec((1, u_prev.len()), u_prev.to_vec()).unwrap());
    let (out, _) = trm_encode_graph(&vars, params.n_heads, &u, &group.features)?;
    Ok(out.to_array().row(0).to_vec())
}

/// Value-level fuse for callers outside the training graph.
pub fn mha_fuse(params: &SffrParams, trm_token: &[f64], past_tokens: &[StepToken]) -> StepToken {
    let vars = params.const_vars();
    let q = Var::constant(Array2::from_shape_vec((1, trm_token.len()), trm_token.to_vec()).unwrap());
    let past: Vec<Var> = past_tokens
        .iter()
        .map(|t| {
            Var::constant(Array2::from_shape_vec((1, t.vector.len()), t.vector.clone()).unwrap())
        })
        .collect();
    let (out, _) = mha_fuse_graph(&vars, params.n_heads, &q, &past);
    StepToken {
        vector: out.to_array().row(0).to_vec(),
        step_index: past_tokens.len() + 1,
    }
}

/// Value-level Siamese loss over step tokens.
pub fn sia_loss(params: &SffrParams, tokens: &[StepToken]) -> f64 {
    let vars = params.const_vars();
    let token_vars: Vec<Var> = tokens
        .iter()
        .map(|t| {
            Var::constant(Array2::from_shape_vec((1, t.vector.len()), t.vector.clone()).unwrap())
        })
        .collect();
    sia_loss_graph(&vars, &token_vars).scalar_value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    fn group_from(features: Array2<f64>) -> SampledGroup {
        let n = features.dim().0;
        SampledGroup {
            indices: (0..n).collect(),
            coords: Array2::zeros((n, 2)),
            features,
        }
    }

    #[test]
    fn trm_attention_rows_normalize() {
        let mut rng = stream(2, "sffr-trm");
        let params = SffrParams::init(8, 2, 16, &mut rng).unwrap();
        let group = group_from(crate::params::normal(5, 8, 1.0, &mut rng));
        let vars = params.vars();
        let u = Var::constant(params.init_token.clone());
        let (_, trace) = trm_encode_graph(&vars, 2, &u, &group.features).unwrap();
        for head in &trace.per_head {
            assert_eq!(head.dim(), (6, 6));
            for row in head.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn trm_rejects_empty_group() {
        let mut rng = stream(2, "sffr-empty");
        let params = SffrParams::init(8, 2, 4, &mut rng).unwrap();
        let vars = params.vars();
        let u = Var::constant(params.init_token.clone());
        let empty = Array2::zeros((0, 8));
        assert!(matches!(
            trm_encode_graph(&vars, 2, &u, &empty),
            Err(Error::EmptyGroup)
        ));
    }

    #[test]
    fn identity_value_paths_mix_inside_the_convex_hull() {
        // Single head, identity value/output projections, zeroed feed-forward
        // output, and inputs that are already layer-norm fixed points
        // (zero mean, unit variance per row): the attention residual at the
        // token position must then equal the attention-weight mix of the
        // inputs, a convex combination recomputed here from the exported
        // weights.
        let dim = 4;
        let mut rng = stream(6, "sffr-hull");
        let mut params = SffrParams::init(dim, 1, 8, &mut rng).unwrap();
        let eye = Array2::eye(dim);
        params.trm.attn.wv = eye.clone();
        params.trm.attn.bv = Array2::zeros((1, dim));
        params.trm.attn.wo = eye;
        params.trm.attn.bo = Array2::zeros((1, dim));
        params.trm.ffn.w2 = Array2::zeros((4 * dim, dim));
        params.trm.ffn.b2 = Array2::zeros((1, dim));

        // Rows with mean 0 and population variance 1 are fixed points of the
        // first layer norm (up to the epsilon), so the values the attention
        // mixes are the inputs themselves.
        let base = [
            [1.0, -1.0, 1.0, -1.0],
            [-1.0, 1.0, 1.0, -1.0],
            [1.0, 1.0, -1.0, -1.0],
        ];
        let u_prev = array![[1.0, -1.0, -1.0, 1.0]];
        let group = Array2::from_shape_fn((3, dim), |(i, j)| base[i][j]);
        // Disable positional rows so the mixed values stay normalized.
        params.positional = Array2::zeros((8, dim));

        let vars = params.vars();
        let u = Var::constant(u_prev.clone());
        let (out, trace) = trm_encode_graph(&vars, 1, &u, &group).unwrap();
        let out = out.to_array();
        let weights = &trace.per_head[0];

        let eps_scale = (1.0f64 / (1.0 + crate::nn::LAYER_NORM_EPS)).sqrt();
        let mut inputs = vec![u_prev.row(0).to_vec()];
        for row in group.rows() {
            inputs.push(row.to_vec());
        }
        let mut expected = u_prev.row(0).to_vec();
        let mut weight_sum = 0.0;
        for (j, input) in inputs.iter().enumerate() {
            let w = weights[(0, j)];
            assert!(w >= 0.0);
            weight_sum += w;
            for (e, v) in expected.iter_mut().zip(input) {
                *e += w * v * eps_scale;
            }
        }
        assert!((weight_sum - 1.0).abs() < 1e-9, "attention row is a distribution");
        for (a, b) in out.row(0).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn joint_permutation_leaves_token_output_unchanged() {
        let dim = 8;
        let mut rng = stream(8, "sffr-perm");
        let params = SffrParams::init(dim, 2, 6, &mut rng).unwrap();
        let group = crate::params::normal(4, dim, 1.0, &mut rng);
        let perm = [2usize, 0, 3, 1];
        let mut permuted_group = group.clone();
        let mut permuted_params = params.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted_group.row_mut(dst).assign(&group.row(src));
            permuted_params.positional.row_mut(dst).assign(&params.positional.row(src));
        }
        let u = Var::constant(params.init_token.clone());
        let (a, _) = trm_encode_graph(&params.vars(), 2, &u, &group).unwrap();
        let (b, _) = trm_encode_graph(&permuted_params.vars(), 2, &u, &permuted_group).unwrap();
        let (a, b) = (a.to_array(), b.to_array());
        for j in 0..dim {
            assert!((a[(0, j)] - b[(0, j)]).abs() < 1e-10);
        }
    }

    #[test]
    fn fuse_with_empty_history_attends_only_to_itself() {
        let mut rng = stream(3, "sffr-fuse");
        let params = SffrParams::init(8, 2, 4, &mut rng).unwrap();
        let vars = params.vars();
        let token = Var::constant(crate::params::normal(1, 8, 1.0, &mut rng));
        let (out1, trace) = mha_fuse_graph(&vars, 2, &token, &[]);
        for head in &trace.per_head {
            assert_eq!(head.dim(), (1, 1));
            assert_eq!(head[(0, 0)], 1.0);
        }
        // Independent of whatever other buffers exist: rebuild and compare.
        let (out2, _) = mha_fuse_graph(&vars, 2, &token, &[]);
        assert_eq!(out1.to_array(), out2.to_array());
    }

    #[test]
    fn fuse_weights_normalize_over_history() {
        let mut rng = stream(4, "sffr-fuse2");
        let params = SffrParams::init(8, 2, 4, &mut rng).unwrap();
        let vars = params.vars();
        let token = Var::constant(crate::params::normal(1, 8, 1.0, &mut rng));
        let past: Vec<Var> =
            (0..3).map(|_| Var::constant(crate::params::normal(1, 8, 1.0, &mut rng))).collect();
        let (_, trace) = mha_fuse_graph(&vars, 2, &token, &past);
        for head in &trace.per_head {
            assert_eq!(head.dim(), (1, 4));
            assert!((head.row(0).sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sia_identical_tokens_with_identity_predictions_score_minus_one() {
        let t1 = Var::row(&[0.3, -0.4, 0.5]);
        let tokens = vec![t1.clone(), t1.clone(), t1.clone()];
        let loss = sia_loss_from_predictions(&tokens, &tokens);
        assert!((loss.scalar_value() - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn sia_orthogonal_predictions_score_zero() {
        let tokens = vec![Var::row(&[1.0, 0.0]), Var::row(&[1.0, 0.0])];
        let preds = vec![Var::row(&[0.0, 1.0]), Var::row(&[0.0, 1.0])];
        let loss = sia_loss_from_predictions(&preds, &tokens);
        assert!(loss.scalar_value().abs() < 1e-12);
    }

    #[test]
    fn sia_hand_computed_pair() {
        // p2=(1,0) against u1=(1,1)/sqrt(2) gives -cos = -0.7071; p1=(0,1)
        // against u2=(1,0) gives 0; the single term averages to -0.35355.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let tokens = vec![Var::row(&[s, s]), Var::row(&[1.0, 0.0])];
        let preds = vec![Var::row(&[0.0, 1.0]), Var::row(&[1.0, 0.0])];
        let loss = sia_loss_from_predictions(&preds, &tokens);
        assert!((loss.scalar_value() - (-0.35355)).abs() < 1e-4);
    }

    #[test]
    fn sia_single_token_is_zero_with_zero_gradient() {
        let mut rng = stream(5, "sffr-sia1");
        let params = SffrParams::init(8, 2, 4, &mut rng).unwrap();
        let vars = params.vars();
        let tokens = vec![Var::param(crate::params::normal(1, 8, 1.0, &mut rng))];
        let loss = sia_loss_graph(&vars, &tokens);
        assert_eq!(loss.scalar_value(), 0.0);
        let grads = vars.grads(2);
        let mut all_zero = true;
        grads.visit(&mut |_, a| all_zero &= a.iter().all(|v| *v == 0.0));
        assert!(all_zero);
    }

    #[test]
    fn sia_gradient_flows_to_predictor_not_to_stopped_targets() {
        let mut rng = stream(7, "sffr-sia-grad");
        let params = SffrParams::init(8, 2, 4, &mut rng).unwrap();
        let vars = params.vars();
        let tokens: Vec<Var> =
            (0..3).map(|_| Var::param(crate::params::normal(1, 8, 0.8, &mut rng))).collect();
        let loss = sia_loss_graph(&vars, &tokens);
        loss.backward();
        let grads = vars.grads(2);
        let pred_grad_norm: f64 = grads.predictor.w1.iter().map(|v| v * v).sum();
        assert!(pred_grad_norm > 0.0, "predictor must receive gradient");
        // Tokens do receive gradient, but only through the predictor branch;
        // the target branch is stopped. Verify by comparing against a loss
        // where the token appears only as a target: its grad must be None.
        let lone = Var::param(crate::params::normal(1, 8, 0.8, &mut rng));
        let pred = Var::constant(crate::params::normal(1, 8, 0.8, &mut rng));
        let term = crate::autodiff::cosine_rows(&pred, &lone.stop_gradient()).neg();
        term.backward();
        assert!(lone.grad().is_none(), "stop-gradient target must get exactly zero");
    }

    #[test]
    fn trm_output_stays_finite_for_large_inputs() {
        let mut rng = stream(11, "sffr-big");
        let params = SffrParams::init(8, 2, 8, &mut rng).unwrap();
        let vars = params.vars();
        let big = crate::params::normal(6, 8, 1.0, &mut rng).mapv(|v| v * 1e3);
        let u = Var::constant(params.init_token.clone());
        let (out, _) = trm_encode_graph(&vars, 2, &u, &big).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn step_path_is_deterministic() {
        let mut rng = stream(12, "sffr-det");
        let params = SffrParams::init(8, 2, 8, &mut rng).unwrap();
        let group = group_from(crate::params::normal(5, 8, 1.0, &mut rng));
        let u0 = params.init_token.row(0).to_vec();
        let enc1 = trm_encode(&params, &u0, &group).unwrap();
        let enc2 = trm_encode(&params, &u0, &group).unwrap();
        assert_eq!(enc1, enc2);
        let tok1 = mha_fuse(&params, &enc1, &[]);
        let tok2 = mha_fuse(&params, &enc2, &[]);
        assert_eq!(tok1, tok2);
    }
}
