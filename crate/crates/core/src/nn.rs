//! Small parameterised building blocks shared by attention and the model.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Graph, ParamId, Params, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Uniform(-bound, bound) tensor.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    if bound == 0.0 {
        return Tensor::zeros(shape);
    }
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// `y = x W + b` with `W: [d_in, d_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Weights and bias drawn from U(±1/√d_in).
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let w = params.add(format!("{name}.w"), uniform(rng, &[d_in, d_out], bound));
        let b = params.add(format!("{name}.b"), uniform(rng, &[d_out], bound));
        Self { w, b, d_in, d_out }
    }

    pub fn zeros(params: &mut Params, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = params.add(format!("{name}.w"), Tensor::zeros(&[d_in, d_out]));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'g>(&self, g: &'g Graph, params: &Params, x: &Var<'g>) -> Result<Var<'g>> {
        x.matmul(&g.param(params, self.w))?.add_row(&g.param(params, self.b))
    }
}

/// Layer normalisation over the last axis with learnable gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(params: &mut Params, name: &str, d: usize) -> Self {
        Self {
            gain: params.add(format!("{name}.gain"), Tensor::ones(&[d])),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, params: &Params, x: &Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(LAYER_NORM_EPS)?
            .mul_row(&g.param(params, self.gain))?
            .add_row(&g.param(params, self.bias))
    }
}

/// affine → ReLU → affine
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, d: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            up: Linear::new(params, &format!("{name}.up"), d, hidden, rng),
            down: Linear::new(params, &format!("{name}.down"), hidden, d, rng),
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, params: &Params, x: &Var<'g>) -> Result<Var<'g>> {
        let h = self.up.forward(g, params, x)?.relu();
        self.down.forward(g, params, &h)
    }
}
