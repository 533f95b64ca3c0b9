//! Recurrent gate core producing the per-step rates `f_tau` and drives `f_phi`.

use rand::Rng;

use crate::autograd::{Graph, ParamId, Params, Var};
use crate::error::{invalid, Result};
use crate::nn::{uniform, Linear};
use crate::tensor::Tensor;

/// Gated recurrent cell (hidden size = per-head dim) with two scalar heads.
///
/// The cell input at Euler step `n` is `[u; t_n]` with `u = [q; k]`. Gate
/// blocks are laid out `reset | update | candidate` along the last axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateCore {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub head_phi: Linear,
    pub head_tau: Linear,
    pub head_dim: usize,
    pub epsilon: f64,
}

/// Gate outputs for one Euler step, each `[pairs, 1]`.
#[derive(Debug, Clone)]
pub struct GateStep<'g> {
    pub f_tau: Var<'g>,
    pub f_phi: Var<'g>,
    pub hidden: Var<'g>,
}

impl GateCore {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, head_dim: usize, epsilon: f64, rng: &mut R) -> Result<Self> {
        if head_dim == 0 {
            return Err(invalid("gate core needs a positive head dimension"));
        }
        if !(epsilon > 0.0) {
            return Err(invalid(format!("epsilon must be positive, got {epsilon}")));
        }
        let d = head_dim;
        let in_bound = 1.0 / ((2 * d + 1) as f64).sqrt();
        let hid_bound = 1.0 / (d as f64).sqrt();
        Ok(Self {
            w_ih: params.add(format!("{name}.w_ih"), uniform(rng, &[2 * d + 1, 3 * d], in_bound)),
            b_ih: params.add(format!("{name}.b_ih"), uniform(rng, &[3 * d], in_bound)),
            w_hh: params.add(format!("{name}.w_hh"), uniform(rng, &[d, 3 * d], hid_bound)),
            b_hh: params.add(format!("{name}.b_hh"), uniform(rng, &[3 * d], hid_bound)),
            head_phi: Linear::new(params, &format!("{name}.phi"), d, 1, rng),
            head_tau: Linear::new(params, &format!("{name}.tau"), d, 1, rng),
            head_dim: d,
            epsilon,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.w_ih,
            self.b_ih,
            self.w_hh,
            self.b_hh,
            self.head_phi.w,
            self.head_phi.b,
            self.head_tau.w,
            self.head_tau.b,
        ]
    }

    /// Zero hidden state for `pairs` independent gate trajectories.
    pub fn initial_hidden<'g>(&self, g: &'g Graph, pairs: usize) -> Var<'g> {
        g.constant(Tensor::zeros(&[pairs, self.head_dim]))
    }

    /// `u · W_ih[..2D]`, the time-independent part of the input transform.
    pub fn project_input<'g>(&self, g: &'g Graph, params: &Params, u: &Var<'g>) -> Result<Var<'g>> {
        let w_u = g.param(params, self.w_ih).narrow(0, 0, 2 * self.head_dim)?;
        u.matmul(&w_u)
    }

    /// One cell step from a precomputed input projection.
    pub fn step<'g>(&self, g: &'g Graph, params: &Params, projected: &Var<'g>, t_n: f64, hidden: &Var<'g>) -> Result<GateStep<'g>> {
        let d = self.head_dim;
        let w_t = g.param(params, self.w_ih).narrow(0, 2 * d, 1)?.reshape(&[3 * d])?;
        let bias = w_t.scale(t_n).add(&g.param(params, self.b_ih))?;
        let gi = projected.add_row(&bias)?;
        let gh = hidden.matmul(&g.param(params, self.w_hh))?.add_row(&g.param(params, self.b_hh))?;
        let block = |x: &Var<'g>, i: usize| x.narrow(1, i * d, d);
        let r = block(&gi, 0)?.add(&block(&gh, 0)?)?.sigmoid();
        let z = block(&gi, 1)?.add(&block(&gh, 1)?)?.sigmoid();
        let n = block(&gi, 2)?.add(&r.mul(&block(&gh, 2)?)?)?.tanh();
        let hidden = n.add(&z.mul(&hidden.sub(&n)?)?)?;
        let f_phi = self.head_phi.forward(g, params, &hidden)?.tanh();
        let f_tau = self.head_tau.forward(g, params, &hidden)?.softplus().add_scalar(self.epsilon);
        Ok(GateStep { f_tau, f_phi, hidden })
    }
}

/// One gate evaluation on input `[u; t_n]`, `u: [pairs, 2D]`.
pub fn gate_forward<'g>(g: &'g Graph, params: &Params, core: &GateCore, u: &Var<'g>, t_n: f64, hidden: &Var<'g>) -> Result<GateStep<'g>> {
    let projected = core.project_input(g, params, u)?;
    core.step(g, params, &projected, t_n, hidden)
}
