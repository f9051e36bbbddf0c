//! Shared network building blocks: linear layers, two-layer MLPs, multi-head
//! attention, and the pre-LN transformer encoder block used by both the
//! fusion and classification modules.

use crate::autodiff::{concat_cols, Var};
use crate::params::{param_struct, ones, xavier, zeros};
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

param_struct! {
    pub struct LinearParams / LinearVars { weight, bias }
}

param_struct! {
    pub struct LayerNormParams / LayerNormVars { gamma, beta }
}

param_struct! {
    /// Projection weights of one multi-head attention layer.
    pub struct AttentionParams / AttentionVars { wq, bq, wk, bk, wv, bv, wo, bo }
}

param_struct! {
    pub struct MlpParams / MlpVars { w1, b1, w2, b2 }
}

impl LinearParams {
    pub fn init(d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams { weight: xavier(d_in, d_out, rng), bias: zeros(1, d_out) }
    }
}

impl LayerNormParams {
    pub fn init(dim: usize) -> Self {
        LayerNormParams { gamma: ones(1, dim), beta: zeros(1, dim) }
    }
}

impl AttentionParams {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        AttentionParams {
            wq: xavier(dim, dim, rng),
            bq: zeros(1, dim),
            wk: xavier(dim, dim, rng),
            bk: zeros(1, dim),
            wv: xavier(dim, dim, rng),
            bv: zeros(1, dim),
            wo: xavier(dim, dim, rng),
            bo: zeros(1, dim),
        }
    }
}

impl MlpParams {
    pub fn init(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        MlpParams {
            w1: xavier(d_in, d_hidden, rng),
            b1: zeros(1, d_hidden),
            w2: xavier(d_hidden, d_out, rng),
            b2: zeros(1, d_out),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Activation {
    Gelu,
    Tanh,
}

pub fn linear(vars: &LinearVars, x: &Var) -> Var {
    x.matmul(&vars.weight).add_row(&vars.bias)
}

pub fn mlp(vars: &MlpVars, x: &Var, act: Activation) -> Var {
    let h = x.matmul(&vars.w1).add_row(&vars.b1);
    let h = match act {
        Activation::Gelu => h.gelu_(),
        Activation::Tanh => h.tanh_(),
    };
    h.matmul(&vars.w2).add_row(&vars.b2)
}

/// Attention weights actually used in a forward pass, one matrix per head,
/// detached from the graph. Row i holds the softmax distribution query i
/// placed over the keys.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub per_head: Vec<Array2<f64>>,
}

impl AttentionTrace {
    /// Head-averaged weights.
    pub fn mean_weights(&self) -> Array2<f64> {
        let mut acc = self.per_head[0].clone();
        for h in &self.per_head[1..] {
            acc += h;
        }
        acc / self.per_head.len() as f64
    }
}

/// Multi-head scaled dot-product attention. `queries` is nq x D, `keys` is
/// nk x D and doubles as the value source.
pub fn multi_head_attention(
    vars: &AttentionVars,
    queries: &Var,
    keys: &Var,
    n_heads: usize,
) -> (Var, AttentionTrace) {
    let dim = queries.shape().1;
    assert_eq!(dim % n_heads, 0, "model width must divide into heads");
    let dh = dim / n_heads;
    let q = queries.matmul(&vars.wq).add_row(&vars.bq);
    let k = keys.matmul(&vars.wk).add_row(&vars.bk);
    let v = keys.matmul(&vars.wv).add_row(&vars.bv);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(n_heads);
    let mut trace = AttentionTrace::default();
    for h in 0..n_heads {
        let qh = q.slice_cols(h * dh, dh);
        let kh = k.slice_cols(h * dh, dh);
        let vh = v.slice_cols(h * dh, dh);
        let attn = qh.matmul(&kh.transpose()).scale(scale).softmax_rows();
        trace.per_head.push(attn.to_array());
        head_outputs.push(attn.matmul(&vh));
    }
    let merged = if n_heads == 1 {
        head_outputs.pop().unwrap()
    } else {
        concat_cols(&head_outputs)
    };
    (merged.matmul(&vars.wo).add_row(&vars.bo), trace)
}

/// One pre-LN transformer encoder block: attention and feed-forward sublayers
/// with residual connections. The feed-forward hidden width is 4x the model
/// width by construction of `EncoderBlockParams::init`.
#[derive(Clone, Debug)]
pub struct EncoderBlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: MlpParams,
}

pub struct EncoderBlockVars {
    pub ln1: LayerNormVars,
    pub attn: AttentionVars,
    pub ln2: LayerNormVars,
    pub ffn: MlpVars,
}

impl EncoderBlockParams {
    pub fn init(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderBlockParams {
            ln1: LayerNormParams::init(dim),
            attn: AttentionParams::init(dim, rng),
            ln2: LayerNormParams::init(dim),
            ffn: MlpParams::init(dim, 4 * dim, dim, rng),
        }
    }

    pub fn vars(&self) -> EncoderBlockVars {
        EncoderBlockVars {
            ln1: self.ln1.vars(),
            attn: self.attn.vars(),
            ln2: self.ln2.vars(),
            ffn: self.ffn.vars(),
        }
    }

    pub fn const_vars(&self) -> EncoderBlockVars {
        EncoderBlockVars {
            ln1: self.ln1.const_vars(),
            attn: self.attn.const_vars(),
            ln2: self.ln2.const_vars(),
            ffn: self.ffn.const_vars(),
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &Array2<f64>)) {
        self.ln1.visit(&mut |n, a| f(&format!("ln1.{n}"), a));
        self.attn.visit(&mut |n, a| f(&format!("attn.{n}"), a));
        self.ln2.visit(&mut |n, a| f(&format!("ln2.{n}"), a));
        self.ffn.visit(&mut |n, a| f(&format!("ffn.{n}"), a));
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Array2<f64>)) {
        self.ln1.visit_mut(&mut |n, a| f(&format!("ln1.{n}"), a));
        self.attn.visit_mut(&mut |n, a| f(&format!("attn.{n}"), a));
        self.ln2.visit_mut(&mut |n, a| f(&format!("ln2.{n}"), a));
        self.ffn.visit_mut(&mut |n, a| f(&format!("ffn.{n}"), a));
    }

    pub fn for_each_pair(
        &mut self,
        grads: &EncoderBlockParams,
        f: &mut dyn FnMut(&str, &mut Array2<f64>, &Array2<f64>),
    ) {
        self.ln1.for_each_pair(&grads.ln1, &mut |n, p, g| f(&format!("ln1.{n}"), p, g));
        self.attn.for_each_pair(&grads.attn, &mut |n, p, g| f(&format!("attn.{n}"), p, g));
        self.ln2.for_each_pair(&grads.ln2, &mut |n, p, g| f(&format!("ln2.{n}"), p, g));
        self.ffn.for_each_pair(&grads.ffn, &mut |n, p, g| f(&format!("ffn.{n}"), p, g));
    }
}

impl EncoderBlockVars {
    pub fn grads(&self) -> EncoderBlockParams {
        EncoderBlockParams {
            ln1: self.ln1.grads(),
            attn: self.attn.grads(),
            ln2: self.ln2.grads(),
            ffn: self.ffn.grads(),
        }
    }
}

pub fn encoder_block(vars: &EncoderBlockVars, x: &Var, n_heads: usize) -> (Var, AttentionTrace) {
    let normed = x.layer_norm_rows(&vars.ln1.gamma, &vars.ln1.beta, LAYER_NORM_EPS);
    let (attn_out, trace) = multi_head_attention(&vars.attn, &normed, &normed, n_heads);
    let after_attn = x.add(&attn_out);
    let normed2 = after_attn.layer_norm_rows(&vars.ln2.gamma, &vars.ln2.beta, LAYER_NORM_EPS);
    let ffn_out = mlp(&vars.ffn, &normed2, Activation::Gelu);
    (after_attn.add(&ffn_out), trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::array;

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = stream(1, "nn-attn");
        let p = AttentionParams::init(8, &mut rng);
        let x = Var::constant(crate::params::normal(5, 8, 1.0, &mut rng));
        let (_, trace) = multi_head_attention(&p.vars(), &x, &x, 2);
        assert_eq!(trace.per_head.len(), 2);
        for head in &trace.per_head {
            for row in head.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|w| *w >= 0.0));
            }
        }
    }

    #[test]
    fn equal_logit_keys_average_their_values() {
        // Single head, identity projections; the query has equal dot product
        // with both keys, so attention must return their midpoint.
        let dim = 2;
        let eye = ndarray::Array2::eye(dim);
        let p = AttentionParams {
            wq: eye.clone(),
            bq: zeros(1, dim),
            wk: eye.clone(),
            bk: zeros(1, dim),
            wv: eye.clone(),
            bv: zeros(1, dim),
            wo: eye,
            bo: zeros(1, dim),
        };
        let query = Var::constant(array![[1.0, 0.0]]);
        let keys = Var::constant(array![[0.5, 1.0], [0.5, -3.0]]);
        let (out, trace) = multi_head_attention(&p.vars(), &query, &keys, 1);
        let out = out.to_array();
        assert!((out[(0, 0)] - 0.5).abs() < 1e-12);
        assert!((out[(0, 1)] - (-1.0)).abs() < 1e-12);
        let w = &trace.per_head[0];
        assert!((w[(0, 0)] - 0.5).abs() < 1e-12 && (w[(0, 1)] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn encoder_block_is_permutation_equivariant_past_row_zero() {
        let mut rng = stream(4, "nn-block");
        let p = EncoderBlockParams::init(8, &mut rng);
        let x = crate::params::normal(4, 8, 1.0, &mut rng);
        let mut permuted = x.clone();
        // Swap rows 1 and 3, keep row 0 in place.
        for j in 0..8 {
            permuted[(1, j)] = x[(3, j)];
            permuted[(3, j)] = x[(1, j)];
        }
        let (a, _) = encoder_block(&p.vars(), &Var::constant(x), 2);
        let (b, _) = encoder_block(&p.vars(), &Var::constant(permuted), 2);
        let (a, b) = (a.to_array(), b.to_array());
        for j in 0..8 {
            assert!((a[(0, j)] - b[(0, j)]).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_gradient_matches_finite_difference() {
        let mut rng = stream(7, "nn-mlp");
        let p = MlpParams::init(3, 5, 2, &mut rng);
        let x = crate::params::normal(2, 3, 0.7, &mut rng);
        let probe = crate::params::normal(2, 2, 1.0, &mut rng);
        let loss_of = |p: &MlpParams| {
            let v = p.vars();
            mlp(&v, &Var::constant(x.clone()), Activation::Gelu)
                .mul(&Var::constant(probe.clone()))
                .sum()
                .scalar_value()
        };
        let vars = p.vars();
        mlp(&vars, &Var::constant(x.clone()), Activation::Gelu)
            .mul(&Var::constant(probe.clone()))
            .sum()
            .backward();
        let grads = vars.grads();
        let eps = 1e-6;
        let mut checked = 0;
        let mut p_mut = p.clone();
        let coords = [(0usize, 0usize), (1, 2), (2, 4)];
        for (name, grad) in [("w1", &grads.w1), ("b1", &grads.b1)] {
            for &(i, j) in &coords {
                if i >= grad.dim().0 || j >= grad.dim().1 {
                    continue;
                }
                let bump = |delta: f64, pm: &mut MlpParams| {
                    pm.visit_mut(&mut |n, a| {
                        if n == name {
                            a[(i, j)] += delta;
                        }
                    });
                };
                bump(eps, &mut p_mut);
                let up = loss_of(&p_mut);
                bump(-2.0 * eps, &mut p_mut);
                let down = loss_of(&p_mut);
                bump(eps, &mut p_mut);
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grad[(i, j)];
                let denom = numeric.abs().max(analytic.abs()).max(1e-8);
                assert!((numeric - analytic).abs() / denom < 1e-5);
                checked += 1;
            }
        }
        assert!(checked >= 4);
    }
}
