//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! Every value in a computation graph is a dense 2-D array: scalars are 1x1,
//! row vectors 1xD. Ops build a DAG of reference-counted nodes; calling
//! [`Var::backward`] on a 1x1 loss walks the graph once in reverse topological
//! order and accumulates gradients into every node that requires them.
//!
//! Design constraints this module serves:
//! - gradients are checked against central finite differences at 64-bit
//!   precision, so all activations here are smooth (GELU rather than ReLU)
//!   and all backward formulas are exact;
//! - nodes whose inputs are all constants collapse to constants, so pure
//!   inference builds no backward machinery;
//! - graphs are per-thread (`Rc`), while parameter storage lives outside the
//!   graph in plain arrays that many threads may read.

use ndarray::{s, Array2, Axis};
use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

type BackFn = Box<dyn Fn(&Array2<f64>)>;

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    needs_grad: bool,
    parents: Vec<Var>,
    back: Option<BackFn>,
}

/// Handle to one node of the computation graph. Cheap to clone.
pub struct Var {
    node: Rc<RefCell<Node>>,
}

impl Clone for Var {
    fn clone(&self) -> Self {
        Var { node: Rc::clone(&self.node) }
    }
}

fn accumulate(target: &Var, delta: Array2<f64>) {
    let mut n = target.node.borrow_mut();
    if !n.needs_grad {
        return;
    }
    match n.grad.as_mut() {
        Some(g) => *g += &delta,
        None => n.grad = Some(delta),
    }
}

impl Var {
    fn new_leaf(value: Array2<f64>, needs_grad: bool) -> Var {
        Var {
            node: Rc::new(RefCell::new(Node {
                value,
                grad: None,
                needs_grad,
                parents: Vec::new(),
                back: None,
            })),
        }
    }

    fn new_op(value: Array2<f64>, parents: Vec<Var>, back: BackFn) -> Var {
        let needs = parents.iter().any(Var::needs_grad);
        if !needs {
            return Var::new_leaf(value, false);
        }
        Var {
            node: Rc::new(RefCell::new(Node {
                value,
                grad: None,
                needs_grad: true,
                parents,
                back: Some(back),
            })),
        }
    }

    /// Trainable leaf.
    pub fn param(value: Array2<f64>) -> Var {
        Var::new_leaf(value, true)
    }

    /// Non-trainable input.
    pub fn constant(value: Array2<f64>) -> Var {
        Var::new_leaf(value, false)
    }

    pub fn scalar(v: f64) -> Var {
        Var::constant(Array2::from_elem((1, 1), v))
    }

    pub fn row(values: &[f64]) -> Var {
        Var::constant(Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    pub fn value(&self) -> Ref<'_, Array2<f64>> {
        Ref::map(self.node.borrow(), |n| &n.value)
    }

    pub fn to_array(&self) -> Array2<f64> {
        self.node.borrow().value.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        let n = self.node.borrow();
        debug_assert_eq!(n.value.dim(), (1, 1));
        n.value[(0, 0)]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.node.borrow().value.dim()
    }

    pub fn needs_grad(&self) -> bool {
        self.node.borrow().needs_grad
    }

    /// Gradient accumulated by the last `backward` call, if any.
    pub fn grad(&self) -> Option<Array2<f64>> {
        self.node.borrow().grad.clone()
    }

    pub fn grad_or_zeros(&self) -> Array2<f64> {
        let n = self.node.borrow();
        n.grad.clone().unwrap_or_else(|| Array2::zeros(n.value.dim()))
    }

    pub fn zero_grad(&self) {
        self.node.borrow_mut().grad = None;
    }

    /// Detached copy: same value, no history, never receives gradient.
    pub fn stop_gradient(&self) -> Var {
        Var::constant(self.to_array())
    }

    /// Back-propagate from this 1x1 loss node through the graph.
    ///
    /// Consumes the backward closures as it goes, so a graph can only be
    /// walked once; parameter leaves keep their accumulated gradients.
    pub fn backward(&self) {
        assert_eq!(self.shape(), (1, 1), "backward expects a scalar loss");
        let order = topo_order(self);
        self.node.borrow_mut().grad = Some(Array2::ones((1, 1)));
        for var in order.iter().rev() {
            let (back, grad) = {
                let mut n = var.node.borrow_mut();
                if n.back.is_none() {
                    continue;
                }
                match n.grad.take() {
                    // No gradient reached this node (e.g. the unselected
                    // branch of a min); its subtree contributes zero.
                    None => continue,
                    Some(g) => (n.back.take().unwrap(), g),
                }
            };
            back(&grad);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.node.borrow().value.iter().all(|v| v.is_finite())
    }
}

fn topo_order(root: &Var) -> Vec<Var> {
    enum Visit {
        Enter(Var),
        Exit(Var),
    }
    let mut order = Vec::new();
    let mut seen: HashSet<*const RefCell<Node>> = HashSet::new();
    let mut stack = vec![Visit::Enter(root.clone())];
    while let Some(item) = stack.pop() {
        match item {
            Visit::Enter(v) => {
                let ptr = Rc::as_ptr(&v.node);
                if !seen.insert(ptr) {
                    continue;
                }
                stack.push(Visit::Exit(v.clone()));
                for p in v.node.borrow().parents.iter() {
                    if p.needs_grad() && !seen.contains(&Rc::as_ptr(&p.node)) {
                        stack.push(Visit::Enter(p.clone()));
                    }
                }
            }
            Visit::Exit(v) => order.push(v),
        }
    }
    order
}

// ---------------------------------------------------------------------------
// ops
// ---------------------------------------------------------------------------

impl Var {
    pub fn matmul(&self, rhs: &Var) -> Var {
        let value = self.value().dot(&*rhs.value());
        let a = self.clone();
        let b = rhs.clone();
        Var::new_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = g.dot(&b.value().t());
                accumulate(&a, da);
                let db = a.value().t().dot(g);
                accumulate(&b, db);
            }),
        )
    }

    pub fn transpose(&self) -> Var {
        let value = self.value().t().to_owned();
        let a = self.clone();
        Var::new_op(
            value,
            vec![self.clone()],
            Box::new(move |g| accumulate(&a, g.t().to_owned())),
        )
    }

    pub fn add(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let value = &*self.value() + &*rhs.value();
        let a = self.clone();
        let b = rhs.clone();
        Var::new_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                accumulate(&a, g.clone());
                accumulate(&b, g.clone());
            }),
        )
    }

    pub fn sub(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let value = &*self.value() - &*rhs.value();
        let a = self.clone();
        let b = rhs.clone();
        Var::new_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                accumulate(&a, g.clone());
                accumulate(&b, -g);
            }),
        )
    }

    pub fn mul(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "mul: shape mismatch");
        let value = &*self.value() * &*rhs.value();
        let a = self.clone();
        let b = rhs.clone();
        Var::new_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = g * &*b.value();
                accumulate(&a, da);
                let db = g * &*a.value();
                accumulate(&b, db);
            }),
        )
    }

    pub fn div(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "div: shape mismatch");
        let value = &*self.value() / &*rhs.value();
        let a = self.clone();
        let b = rhs.clone();
        Var::new_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = g / &*b.value();
                accumulate(&a, da);
                let db = {
                    let bv = b.value();
                    let av = a.value();
                    -(g * &*av) / (&*bv * &*bv)
                };
                accumulate(&b, db);
            }),
        )
    }

    /// Add a 1xC row to every row of an RxC matrix.
    pub fn add_row(&self, row: &Var) -> Var {
        let (r, c) = self.shape();
        assert_eq!(row.shape(), (1, c), "add_row: shape mismatch");
        let mut value = self.to_array();
        let rv = row.value();
        for i in 0..r {
            for j in 0..c {
                value[(i, j)] += rv[(0, j)];
            }
        }
        let a = self.clone();
        let b = row.clone();
        Var::new_op(
            value,
            vec![self.clone(), row.clone()],
            Box::new(move |g| {
                accumulate(&a, g.clone());
                let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(&b, db);
            }),
        )
    }

    pub fn scale(&self, k: f64) -> Var {
        let value = &*self.value() * k;
        let a = self.clone();
        Var::new_op(value, vec![self.clone()], Box::new(move |g| accumulate(&a, g * k)))
    }

    pub fn add_scalar(&self, k: f64) -> Var {
        let value = &*self.value() + k;
        let a = self.clone();
        Var::new_op(value, vec![self.clone()], Box::new(move |g| accumulate(&a, g.clone())))
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn sum(&self) -> Var {
        let total = self.value().sum();
        let a = self.clone();
        let dim = self.shape();
        Var::new_op(
            Array2::from_elem((1, 1), total),
            vec![self.clone()],
            Box::new(move |g| accumulate(&a, Array2::from_elem(dim, g[(0, 0)]))),
        )
    }

    pub fn mean(&self) -> Var {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var {
        let value = self.value().slice(s![start..start + len, ..]).to_owned();
        let a = self.clone();
        let dim = self.shape();
        Var::new_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = Array2::zeros(dim);
                da.slice_mut(s![start..start + len, ..]).assign(g);
                accumulate(&a, da);
            }),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var {
        let value = self.value().slice(s![.., start..start + len]).to_owned();
        let a = self.clone();
        let dim = self.shape();
        Var::new_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = Array2::zeros(dim);
                da.slice_mut(s![.., start..start + len]).assign(g);
                accumulate(&a, da);
            }),
        )
    }

    pub fn get(&self, r: usize, c: usize) -> Var {
        let value = Array2::from_elem((1, 1), self.value()[(r, c)]);
        let a = self.clone();
        let dim = self.shape();
        Var::new_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = Array2::zeros(dim);
                da[(r, c)] = g[(0, 0)];
                accumulate(&a, da);
            }),
        )
    }

    fn unary(&self, f: impl Fn(f64) -> f64, dfdx: impl Fn(f64) -> f64 + 'static) -> Var {
        let value = self.value().mapv(&f);
        let a = self.clone();
        Var::new_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let da = {
                    let av = a.value();
                    let mut d = g.clone();
                    d.zip_mut_with(&av, |gi, &x| *gi *= dfdx(x));
                    d
                };
                accumulate(&a, da);
            }),
        )
    }

    pub fn tanh_(&self) -> Var {
        self.unary(f64::tanh, |x| 1.0 - x.tanh().powi(2))
    }

    pub fn sigmoid_(&self) -> Var {
        self.unary(sigmoid, |x| {
            let s = sigmoid(x);
            s * (1.0 - s)
        })
    }

    pub fn exp_(&self) -> Var {
        self.unary(f64::exp, f64::exp)
    }

    pub fn ln_(&self) -> Var {
        self.unary(f64::ln, |x| 1.0 / x)
    }

    pub fn sqrt_(&self) -> Var {
        self.unary(f64::sqrt, |x| 0.5 / x.sqrt())
    }

    /// GELU, tanh approximation. Smooth everywhere, which keeps central
    /// finite-difference checks clean.
    pub fn gelu_(&self) -> Var {
        self.unary(gelu, gelu_prime)
    }

    /// Clamp values to `[lo, hi]`; gradient passes only where the input was
    /// already inside the interval.
    pub fn clamp_(&self, lo: f64, hi: f64) -> Var {
        let value = self.value().mapv(|x| x.clamp(lo, hi));
        let a = self.clone();
        Var::new_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let da = {
                    let av = a.value();
                    let mut d = g.clone();
                    d.zip_mut_with(&av, |gi, &x| {
                        if !(lo..=hi).contains(&x) {
                            *gi = 0.0;
                        }
                    });
                    d
                };
                accumulate(&a, da);
            }),
        )
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn min_pair(&self, rhs: &Var) -> Var {
        assert_eq!(self.shape(), rhs.shape(), "min_pair: shape mismatch");
        let value = ndarray::Zip::from(&*self.value())
            .and(&*rhs.value())
            .map_collect(|&x, &y| x.min(y));
        let a = self.clone();
        let b = rhs.clone();
        Var::new_op(
            value,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let (da, db) = {
                    let av = a.value();
                    let bv = b.value();
                    let mut da = g.clone();
                    let mut db = g.clone();
                    for ((idx, gi), dbi) in da.indexed_iter_mut().zip(db.iter_mut()) {
                        if av[idx] <= bv[idx] {
                            *dbi = 0.0;
                        } else {
                            *gi = 0.0;
                        }
                    }
                    (da, db)
                };
                accumulate(&a, da);
                accumulate(&b, db);
            }),
        )
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&self) -> Var {
        let value = softmax_rows_value(&self.value());
        let a = self.clone();
        let out = value.clone();
        Var::new_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = g * &out;
                for (mut da_row, (g_row, y_row)) in da
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows().into_iter().zip(out.rows().into_iter()))
                {
                    let dot: f64 = g_row.iter().zip(y_row.iter()).map(|(gi, yi)| gi * yi).sum();
                    for (d, y) in da_row.iter_mut().zip(y_row.iter()) {
                        *d -= dot * y;
                    }
                }
                accumulate(&a, da);
            }),
        )
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(&self) -> Var {
        let probs = softmax_rows_value(&self.value());
        let value = probs.mapv(f64::ln);
        let a = self.clone();
        Var::new_op(
            value,
            vec![self.clone()],
            Box::new(move |g| {
                let mut da = g.clone();
                for (mut da_row, (g_row, p_row)) in da
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows().into_iter().zip(probs.rows().into_iter()))
                {
                    let gsum: f64 = g_row.sum();
                    for (d, p) in da_row.iter_mut().zip(p_row.iter()) {
                        *d -= gsum * p;
                    }
                }
                accumulate(&a, da);
            }),
        )
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm_rows(&self, gamma: &Var, beta: &Var, eps: f64) -> Var {
        let (r, c) = self.shape();
        assert_eq!(gamma.shape(), (1, c));
        assert_eq!(beta.shape(), (1, c));
        let x = self.value();
        let mut normed = Array2::zeros((r, c));
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = x.row(i);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                normed[(i, j)] = (x[(i, j)] - mean) * is;
            }
        }
        drop(x);
        let gv = gamma.to_array();
        let bv = beta.to_array();
        let mut value = normed.clone();
        for i in 0..r {
            for j in 0..c {
                value[(i, j)] = value[(i, j)] * gv[(0, j)] + bv[(0, j)];
            }
        }
        let a = self.clone();
        let gvar = gamma.clone();
        let bvar = beta.clone();
        Var::new_op(
            value,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let mut dgamma = Array2::zeros((1, c));
                let mut dbeta = Array2::zeros((1, c));
                let mut dx = Array2::zeros((r, c));
                for i in 0..r {
                    let mut mean_gg = 0.0;
                    let mut mean_ggy = 0.0;
                    for j in 0..c {
                        let gg = g[(i, j)] * gv[(0, j)];
                        mean_gg += gg;
                        mean_ggy += gg * normed[(i, j)];
                        dgamma[(0, j)] += g[(i, j)] * normed[(i, j)];
                        dbeta[(0, j)] += g[(i, j)];
                    }
                    mean_gg /= c as f64;
                    mean_ggy /= c as f64;
                    for j in 0..c {
                        let gg = g[(i, j)] * gv[(0, j)];
                        dx[(i, j)] = (gg - mean_gg - normed[(i, j)] * mean_ggy) * inv_std[i];
                    }
                }
                accumulate(&a, dx);
                accumulate(&gvar, dgamma);
                accumulate(&bvar, dbeta);
            }),
        )
    }
}

/// Stack variables vertically (all must share a column count).
pub fn concat_rows(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let c = parts[0].shape().1;
    let total: usize = parts.iter().map(|p| p.shape().0).sum();
    let mut value = Array2::zeros((total, c));
    let mut offset = 0;
    for p in parts {
        let pv = p.value();
        let r = pv.dim().0;
        value.slice_mut(s![offset..offset + r, ..]).assign(&pv);
        offset += r;
    }
    let owned: Vec<Var> = parts.to_vec();
    Var::new_op(
        value,
        owned.clone(),
        Box::new(move |g| {
            let mut offset = 0;
            for p in &owned {
                let r = p.shape().0;
                accumulate(p, g.slice(s![offset..offset + r, ..]).to_owned());
                offset += r;
            }
        }),
    )
}

/// Stack variables horizontally (all must share a row count).
pub fn concat_cols(parts: &[Var]) -> Var {
    assert!(!parts.is_empty());
    let r = parts[0].shape().0;
    let total: usize = parts.iter().map(|p| p.shape().1).sum();
    let mut value = Array2::zeros((r, total));
    let mut offset = 0;
    for p in parts {
        let pv = p.value();
        let c = pv.dim().1;
        value.slice_mut(s![.., offset..offset + c]).assign(&pv);
        offset += c;
    }
    let owned: Vec<Var> = parts.to_vec();
    Var::new_op(
        value,
        owned.clone(),
        Box::new(move |g| {
            let mut offset = 0;
            for p in &owned {
                let c = p.shape().1;
                accumulate(p, g.slice(s![.., offset..offset + c]).to_owned());
                offset += c;
            }
        }),
    )
}

/// Dot product of two 1xD rows, as a 1x1 node.
pub fn dot_rows(a: &Var, b: &Var) -> Var {
    a.mul(b).sum()
}

/// L2 norm of a 1xD row, as a 1x1 node.
pub fn norm_row(a: &Var) -> Var {
    a.mul(a).sum().sqrt_()
}

/// Cosine similarity of two 1xD rows; differentiable, assumes nonzero norms.
pub fn cosine_rows(a: &Var, b: &Var) -> Var {
    dot_rows(a, b).div(&norm_row(a).mul(&norm_row(b)))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x.powi(3))).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x.powi(3));
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
