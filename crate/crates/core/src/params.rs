//! Named parameter blocks and initialization.
//!
//! `param_struct!` generates a plain-array parameter struct together with a
//! graph twin holding `Var` leaves. Training code builds the twin once per
//! graph, runs backward, then reads the gradients back in the same layout.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

macro_rules! param_struct {
    ($(#[$meta:meta])* pub struct $Params:ident / $Vars:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $Params {
            $(pub $field: ndarray::Array2<f64>,)+
        }

        pub struct $Vars {
            $(pub $field: $crate::autodiff::Var,)+
        }

        impl $Params {
            /// Graph leaves mirroring this block; gradients accumulate there.
            pub fn vars(&self) -> $Vars {
                $Vars { $($field: $crate::autodiff::Var::param(self.$field.clone()),)+ }
            }

            /// Constant leaves for inference passes, which then build no
            /// backward machinery at all.
            pub fn const_vars(&self) -> $Vars {
                $Vars { $($field: $crate::autodiff::Var::constant(self.$field.clone()),)+ }
            }

            pub fn visit(&self, f: &mut dyn FnMut(&str, &ndarray::Array2<f64>)) {
                $(f(stringify!($field), &self.$field);)+
            }

            pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::Array2<f64>)) {
                $(f(stringify!($field), &mut self.$field);)+
            }

            /// Paired iteration over this block and a same-shaped block of
            /// gradients, in declaration order.
            pub fn for_each_pair(
                &mut self,
                other: &$Params,
                f: &mut dyn FnMut(&str, &mut ndarray::Array2<f64>, &ndarray::Array2<f64>),
            ) {
                $(f(stringify!($field), &mut self.$field, &other.$field);)+
            }

            pub fn is_finite(&self) -> bool {
                let mut ok = true;
                self.visit(&mut |_, a| ok &= a.iter().all(|v| v.is_finite()));
                ok
            }
        }

        impl $Vars {
            /// Accumulated gradients, zeros where a leaf was never reached.
            pub fn grads(&self) -> $Params {
                $Params { $($field: self.$field.grad_or_zeros(),)+ }
            }
        }
    };
}

pub(crate) use param_struct;

/// Glorot/Xavier uniform init.
pub fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Small-scale normal init, used for tokens and embeddings.
pub fn normal(rows: usize, cols: usize, sd: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, sd).unwrap();
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::ones((rows, cols))
}
