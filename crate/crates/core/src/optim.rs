//! AdaMax optimizer (the infinity-norm Adam variant) with L2 weight decay.

use ndarray::Array2;
use std::collections::BTreeMap;

#[derive(Clone, Debug)]
pub struct AdaMax {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first_moment: BTreeMap<String, Array2<f64>>,
    inf_norm: BTreeMap<String, Array2<f64>>,
}

impl AdaMax {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdaMax {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: BTreeMap::new(),
            inf_norm: BTreeMap::new(),
        }
    }

    /// Advance the shared step counter. Call once per optimizer step, before
    /// updating the step's tensors.
    pub fn advance(&mut self) {
        self.step += 1;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Update one named tensor in place from its gradient.
    pub fn update(&mut self, key: &str, param: &mut Array2<f64>, grad: &Array2<f64>) {
        debug_assert!(self.step > 0, "advance() before update()");
        let m = self
            .first_moment
            .entry(key.to_string())
            .or_insert_with(|| Array2::zeros(param.dim()));
        let u = self
            .inf_norm
            .entry(key.to_string())
            .or_insert_with(|| Array2::zeros(param.dim()));
        let bias = 1.0 - self.beta1.powi(self.step as i32);
        let lr_t = self.lr / bias;
        for ((p, g), (mi, ui)) in param
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(u.iter_mut()))
        {
            let g = g + self.weight_decay * *p;
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            *ui = (self.beta2 * *ui).max(g.abs());
            *p -= lr_t * *mi / (*ui + self.eps);
        }
    }

    /// Moment tensors for checkpointing, in deterministic key order.
    pub fn state(&self) -> impl Iterator<Item = (&str, &Array2<f64>, &Array2<f64>)> {
        self.first_moment
            .iter()
            .map(|(k, m)| (k.as_str(), m, self.inf_norm.get(k).expect("paired moment")))
    }

    pub fn restore(&mut self, step: u64, entries: Vec<(String, Array2<f64>, Array2<f64>)>) {
        self.step = step;
        self.first_moment.clear();
        self.inf_norm.clear();
        for (k, m, u) in entries {
            self.first_moment.insert(k.clone(), m);
            self.inf_norm.insert(k, u);
        }
    }
}
