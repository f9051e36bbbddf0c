//! Transformer classification over step tokens: a learned class token
//! aggregates the episode's tokens through one encoder block, per-step heads
//! score the raw tokens, and a max/top-k fusion rule combines both paths into
//! the final decision. Includes the bag- and step-level cross-entropy losses.

use crate::autodiff::{concat_rows, Var};
use crate::error::{Error, Result};
use crate::nn::{
    encoder_block, linear, AttentionTrace, EncoderBlockParams, EncoderBlockVars, LinearParams,
    LinearVars,
};
use crate::params::normal;
use crate::sffr::StepToken;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

/// Probability clamp for the cross-entropy losses.
pub const PROB_EPS: f64 = 1e-7;

/// How the bag representation is pooled from the episode tokens. The class
/// token is the reference path; max and mean pooling over step tokens are the
/// alternative aggregation heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationKind {
    ClassToken,
    MaxPool,
    MeanPool,
}

#[derive(Clone, Debug)]
pub struct TcmParams {
    pub n_heads: usize,
    pub aggregation: AggregationKind,
    pub class_token: Array2<f64>,
    pub block: EncoderBlockParams,
    pub bag_head: LinearParams,
    pub step_head: LinearParams,
}

pub struct TcmVars {
    pub class_token: Var,
    pub block: EncoderBlockVars,
    pub bag_head: LinearVars,
    pub step_head: LinearVars,
}

impl TcmParams {
    pub fn init(dim: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if dim % n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model dim {dim} must be divisible by {n_heads} heads"
            )));
        }
        Ok(TcmParams {
            n_heads,
            aggregation: AggregationKind::ClassToken,
            class_token: normal(1, dim, 0.02, rng),
            block: EncoderBlockParams::init(dim, rng),
            bag_head: LinearParams::init(dim, 1, rng),
            step_head: LinearParams::init(dim, 1, rng),
        })
    }

    pub fn vars(&self) -> TcmVars {
        TcmVars {
            class_token: Var::param(self.class_token.clone()),
            block: self.block.vars(),
            bag_head: self.bag_head.vars(),
            step_head: self.step_head.vars(),
        }
    }

    pub fn const_vars(&self) -> TcmVars {
        TcmVars {
            class_token: Var::constant(self.class_token.clone()),
            block: self.block.const_vars(),
            bag_head: self.bag_head.const_vars(),
            step_head: self.step_head.const_vars(),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        f("class_token", &self.class_token);
        self.block.visit(&mut |n, a| f(&format!("block.{n}"), a));
        self.bag_head.visit(&mut |n, a| f(&format!("bag_head.{n}"), a));
        self.step_head.visit(&mut |n, a| f(&format!("step_head.{n}"), a));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        f("class_token", &mut self.class_token);
        self.block.visit_mut(&mut |n, a| f(&format!("block.{n}"), a));
        self.bag_head.visit_mut(&mut |n, a| f(&format!("bag_head.{n}"), a));
        self.step_head.visit_mut(&mut |n, a| f(&format!("step_head.{n}"), a));
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn for_each_pair(
        &mut self,
        grads: &TcmParams,
        f: &mut dyn FnMut(&str, &mut Array2<f64>, &Array2<f64>),
    ) {
        f("class_token", &mut self.class_token, &grads.class_token);
        self.block.for_each_pair(&grads.block, &mut |n, p, g| f(&format!("block.{n}"), p, g));
        self.bag_head
            .for_each_pair(&grads.bag_head, &mut |n, p, g| f(&format!("bag_head.{n}"), p, g));
        self.step_head
            .for_each_pair(&grads.step_head, &mut |n, p, g| f(&format!("step_head.{n}"), p, g));
    }
}

impl TcmVars {
    pub fn grads(&self, n_heads: usize, aggregation: AggregationKind) -> TcmParams {
        TcmParams {
            n_heads,
            aggregation,
            class_token: self.class_token.grad_or_zeros(),
            block: self.block.grads(),
            bag_head: self.bag_head.grads(),
            step_head: self.step_head.grads(),
        }
    }
}

/// Graph outputs of one classification pass.
pub struct TcmForward {
    /// Bag probability from the aggregated representation.
    pub score: Var,
    /// One probability per step token, scored before the encoder.
    pub step_scores: Vec<Var>,
    /// Post-encoder class-token embedding (the penalty target).
    pub cls_embedding: Var,
    /// Attention of the block's self-attention layer; row 0 is the class
    /// token's distribution over `[cls] ++ tokens`.
    pub attention: AttentionTrace,
}

pub fn classify_graph(
    vars: &TcmVars,
    n_heads: usize,
    aggregation: AggregationKind,
    tokens: &[Var],
) -> Result<TcmForward> {
    if tokens.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let mut parts = Vec::with_capacity(tokens.len() + 1);
    parts.push(vars.class_token.clone());
    parts.extend(tokens.iter().cloned());
    let seq = concat_rows(&parts);
    let (encoded, attention) = encoder_block(&vars.block, &seq, n_heads);
    let cls_embedding = encoded.slice_rows(0, 1);
    let pooled = match aggregation {
        AggregationKind::ClassToken => cls_embedding.clone(),
        AggregationKind::MaxPool => {
            // max(a, b) = -min(-a, -b)
            let mut acc = tokens[0].clone();
            for t in &tokens[1..] {
                acc = acc.neg().min_pair(&t.neg()).neg();
            }
            acc
        }
        AggregationKind::MeanPool => {
            let mut acc = tokens[0].clone();
            for t in &tokens[1..] {
                acc = acc.add(t);
            }
            acc.scale(1.0 / tokens.len() as f64)
        }
    };
    let score = linear(&vars.bag_head, &pooled).sigmoid_();
    let step_scores = tokens.iter().map(|t| linear(&vars.step_head, t).sigmoid_()).collect();
    Ok(TcmForward { score, step_scores, cls_embedding, attention })
}

/// Value-level prediction for one bag.
#[derive(Clone, Debug)]
pub struct BagPrediction {
    pub score: f64,
    pub fused_score: f64,
    pub step_scores: Vec<f64>,
    pub cls_embedding: Vec<f64>,
}

/// Classify step tokens outside the training graph. The fused score uses the
/// prediction-gated rule (gate opens when the class-token score crosses 0.5).
pub fn classify_bag(params: &TcmParams, tokens: &[StepToken]) -> Result<BagPrediction> {
    let vars = params.const_vars();
    let token_vars: Vec<Var> = tokens
        .iter()
        .map(|t| {
            Var::constant(Array2::from_shape_vec((1, t.vector.len()), t.vector.clone()).unwrap())
        })
        .collect();
    let fwd = classify_graph(&vars, params.n_heads, params.aggregation, &token_vars)?;
    let score = fwd.score.scalar_value();
    let step_scores: Vec<f64> = fwd.step_scores.iter().map(Var::scalar_value).collect();
    Ok(BagPrediction {
        score,
        fused_score: fuse_decision(&step_scores, score, score >= 0.5),
        step_scores,
        cls_embedding: fwd.cls_embedding.to_array().row(0).to_vec(),
    })
}

/// Decision fusion: with the gate open, average the max step score, the
/// top-3 and top-5 step-score means (truncated on short episodes), and the
/// bag score; with the gate closed, pass the bag score through.
pub fn fuse_decision(step_scores: &[f64], score: f64, gate: bool) -> f64 {
    if !gate || step_scores.is_empty() {
        return score;
    }
    let mut sorted = step_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let top_mean = |k: usize| {
        let k = k.min(sorted.len());
        sorted[..k].iter().sum::<f64>() / k as f64
    };
    (sorted[0] + top_mean(3) + top_mean(5) + score) / 4.0
}

fn bce(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Bag-level cross-entropy on the class-token probability.
pub fn wsl_loss(score: f64, label: u8) -> f64 {
    bce(score, label)
}

/// Step-level cross-entropy: the bag label applied to every step score,
/// averaged over steps. Empty input scores zero.
pub fn stl_loss(step_scores: &[f64], label: u8) -> f64 {
    if step_scores.is_empty() {
        return 0.0;
    }
    step_scores.iter().map(|s| bce(*s, label)).sum::<f64>() / step_scores.len() as f64
}

fn bce_graph(prob: &Var, label: u8) -> Var {
    let p = prob.clamp_(PROB_EPS, 1.0 - PROB_EPS);
    if label == 1 {
        p.ln_().neg()
    } else {
        p.neg().add_scalar(1.0).ln_().neg()
    }
}

pub fn wsl_loss_graph(score: &Var, label: u8) -> Var {
    bce_graph(score, label)
}

pub fn stl_loss_graph(step_scores: &[Var], label: u8) -> Var {
    if step_scores.is_empty() {
        return Var::scalar(0.0);
    }
    let mut total = bce_graph(&step_scores[0], label);
    for s in &step_scores[1..] {
        total = total.add(&bce_graph(s, label));
    }
    total.scale(1.0 / step_scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn tokens(n: usize, dim: usize, seed: u64) -> Vec<StepToken> {
        let mut rng = stream(seed, "tcm-tokens");
        (0..n)
            .map(|i| StepToken {
                vector: crate::params::normal(1, dim, 1.0, &mut rng).row(0).to_vec(),
                step_index: i + 1,
            })
            .collect()
    }

    #[test]
    fn encoder_attention_rows_normalize() {
        let mut rng = stream(1, "tcm-attn");
        let params = TcmParams::init(8, 2, &mut rng).unwrap();
        let vars = params.vars();
        let toks: Vec<Var> = tokens(4, 8, 3)
            .into_iter()
            .map(|t| Var::row(&t.vector))
            .collect();
        let fwd = classify_graph(&vars, 2, AggregationKind::ClassToken, &toks).unwrap();
        for head in &fwd.attention.per_head {
            for row in head.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn score_is_invariant_under_token_permutation() {
        let mut rng = stream(2, "tcm-perm");
        let params = TcmParams::init(8, 2, &mut rng).unwrap();
        let toks = tokens(5, 8, 4);
        let mut shuffled = toks.clone();
        shuffled.swap(0, 3);
        shuffled.swap(1, 4);
        let a = classify_bag(&params, &toks).unwrap();
        let b = classify_bag(&params, &shuffled).unwrap();
        assert!((a.score - b.score).abs() < 1e-12);
    }

    #[test]
    fn zeroed_heads_emit_exactly_half() {
        let mut rng = stream(3, "tcm-zero");
        let mut params = TcmParams::init(8, 2, &mut rng).unwrap();
        params.bag_head.weight.fill(0.0);
        params.bag_head.bias.fill(0.0);
        params.step_head.weight.fill(0.0);
        params.step_head.bias.fill(0.0);
        let pred = classify_bag(&params, &tokens(3, 8, 5)).unwrap();
        assert_eq!(pred.score, 0.5);
        assert!(pred.step_scores.iter().all(|s| *s == 0.5));
    }

    #[test]
    fn fusion_reproduces_hand_values() {
        // Max 0.9, top-3 mean 0.8, top-5 mean 0.7, bag score 0.6: the open
        // gate averages to 0.75. Crafted so the sorted step scores have the
        // required top-k means.
        let steps = [0.9f64, 0.85, 0.65, 0.6, 0.5];
        let a3: f64 = (0.9 + 0.85 + 0.65) / 3.0;
        let a5: f64 = steps.iter().sum::<f64>() / 5.0;
        assert!((a3 - 0.8).abs() < 1e-12 && (a5 - 0.7).abs() < 1e-12);
        let fused = fuse_decision(&steps, 0.6, true);
        assert!((fused - 0.75).abs() < 1e-12);

        assert_eq!(fuse_decision(&steps, 0.31, false), 0.31);

        // Short episode: top-3 and top-5 truncate to the two available.
        let fused = fuse_decision(&[0.4, 0.8], 0.5, true);
        assert!((fused - 0.625).abs() < 1e-12);

        // No steps: score passes through.
        assert_eq!(fuse_decision(&[], 0.42, true), 0.42);
    }

    #[test]
    fn fusion_is_monotone_and_bounded() {
        use rand::Rng;
        let mut rng = stream(4, "tcm-mono");
        for _ in 0..200 {
            let t = rng.random_range(1..=8);
            let mut steps: Vec<f64> = (0..t).map(|_| rng.random_range(0.0..=1.0)).collect();
            let score = rng.random_range(0.0..=1.0);
            let base = fuse_decision(&steps, score, true);
            assert!((0.0..=1.0).contains(&base));
            // Raising any one input never lowers the output.
            let k = rng.random_range(0..t);
            let bumped = (steps[k] + 0.1).min(1.0);
            steps[k] = bumped;
            assert!(fuse_decision(&steps, score, true) >= base - 1e-12);
            assert!(fuse_decision(&steps, (score + 0.1).min(1.0), true) >= base - 1e-12);
        }
    }

    #[test]
    fn fusion_fixed_point_on_constant_scores() {
        let c = 0.37;
        let fused = fuse_decision(&[c; 6], c, true);
        assert!((fused - c).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_hand_values() {
        assert!((wsl_loss(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((wsl_loss(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((wsl_loss(0.9, 1) - 0.105_360_5).abs() < 1e-6);
        // Saturated wrong prediction hits the clamp: -ln(1e-7).
        let clamped = wsl_loss(1.0, 0);
        assert!((clamped - (-(PROB_EPS).ln())).abs() < 1e-9);
        assert!((clamped - 16.118_095_6).abs() < 1e-6);
    }

    #[test]
    fn step_loss_averages_and_degenerates() {
        assert!((stl_loss(&[0.5, 0.5, 0.5], 1) - std::f64::consts::LN_2).abs() < 1e-12);
        let two = stl_loss(&[0.9, 0.5], 1);
        assert!((two - (0.105_360_5 + std::f64::consts::LN_2) / 2.0).abs() < 1e-6);
        assert!((two - 0.399_2).abs() < 1e-4);
        assert_eq!(stl_loss(&[0.73], 0), wsl_loss(0.73, 0));
        assert_eq!(stl_loss(&[], 1), 0.0);
    }

    #[test]
    fn loss_graphs_match_value_forms_and_finite_differences() {
        let mut rng = stream(6, "tcm-grad");
        use rand::Rng;
        for _ in 0..10 {
            let raw = rng.random_range(-2.0..2.0);
            let label = rng.random_range(0..=1) as u8;
            let x = Var::param(ndarray::Array2::from_elem((1, 1), raw));
            let score = x.sigmoid_();
            let loss = wsl_loss_graph(&score, label);
            assert!((loss.scalar_value() - wsl_loss(crate::autodiff::sigmoid(raw), label)).abs() < 1e-12);
            loss.backward();
            let g = x.grad().unwrap()[(0, 0)];
            let eps = 1e-6;
            let f = |v: f64| wsl_loss(crate::autodiff::sigmoid(v), label);
            let numeric = (f(raw + eps) - f(raw - eps)) / (2.0 * eps);
            assert!((g - numeric).abs() / numeric.abs().max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn pooled_aggregations_stay_in_unit_interval() {
        let mut rng = stream(7, "tcm-pool");
        for agg in [AggregationKind::MaxPool, AggregationKind::MeanPool] {
            let params = TcmParams {
                aggregation: agg,
                ..TcmParams::init(8, 2, &mut rng).unwrap()
            };
            let pred = classify_bag(&params, &tokens(4, 8, 11)).unwrap();
            assert!((0.0..=1.0).contains(&pred.score));
        }
    }

    #[test]
    fn empty_token_list_is_an_error() {
        let mut rng = stream(8, "tcm-empty");
        let params = TcmParams::init(8, 2, &mut rng).unwrap();
        assert!(classify_bag(&params, &[]).is_err());
    }
}
