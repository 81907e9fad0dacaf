//! Parameterized building blocks shared by the backbone, encoder and decoders.
//!
//! Modules only hold [`ParamId`]s; values live in a [`ParamStore`] and are
//! bound to a graph at forward time.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Scalar;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let weight = ps.add_trunc_normal(format!("{name}.weight"), vec![d_in, d_out], INIT_STD, rng);
        let bias = bias.then(|| ps.add_zeros(format!("{name}.bias"), vec![d_out]));
        Linear { weight, bias, d_in, d_out }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(g.param(self.weight), self.bias.map(|b| g.param(b)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        LayerNorm { gamma: ps.add_ones(format!("{name}.gamma"), vec![width]), beta: ps.add_zeros(format!("{name}.beta"), vec![width]) }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(g.param(self.gamma), g.param(self.beta), LN_EPS)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, width: usize, hidden: usize) -> Self {
        Mlp {
            fc1: Linear::new(ps, rng, &format!("{name}.fc1"), width, hidden, true),
            fc2: Linear::new(ps, rng, &format!("{name}.fc2"), hidden, width, true),
        }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.fc1.forward(g, x)?.gelu()?;
        self.fc2.forward(g, h)
    }
}

/// Hidden width of an MLP with the given expansion ratio.
pub fn hidden_width(width: usize, ratio: f64) -> usize {
    ((width as f64 * ratio).round() as usize).max(1)
}

/// Per-position linear map, batch normalization and ReLU.
#[derive(Clone, Debug)]
pub struct LinearBnRelu {
    pub linear: Linear,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl LinearBnRelu {
    pub fn new<T: Scalar>(ps: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, d_in: usize, d_out: usize) -> Self {
        let linear = Linear::new(ps, rng, &format!("{name}.linear"), d_in, d_out, true);
        let gamma = ps.add_ones(format!("{name}.bn.gamma"), vec![d_out]);
        let beta = ps.add_zeros(format!("{name}.bn.beta"), vec![d_out]);
        let running_mean = ps.add(format!("{name}.bn.running_mean"), crate::tensor::Tensor::zeros(vec![d_out]), false);
        let running_var = ps.add(format!("{name}.bn.running_var"), crate::tensor::Tensor::full(vec![d_out], T::one()), false);
        LinearBnRelu { linear, gamma, beta, running_mean, running_var }
    }

    pub fn forward<'g, T: Scalar>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = self.linear.forward(g, x)?;
        y.batch_norm(g.param(self.gamma), g.param(self.beta), (self.running_mean, self.running_var), BN_EPS, BN_MOMENTUM)?
            .relu()
    }
}
