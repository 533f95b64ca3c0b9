//! Liquid attention: pairwise logits evolved by a gated linear ODE.
//!
//! Each query–key pair carries a scalar logit `a` with `a₀ = 0` and
//! `ȧ = −f_tau·a + f_phi`. The rates come from a small recurrent gate
//! evaluated on `u = [q; k]`. After `N` explicit Euler steps the final
//! logits go through a masked softmax and weight the gathered values.

mod gate;
mod ode;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Graph, Params, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::sparse::{select_pairs, PairSelection, TopK};
use crate::tensor::Tensor;

pub use gate::{gate_forward, GateCore, GateStep};
pub use ode::{clamp_dt, euler_step, euler_step_var, LogitTrajectory, TrajectorySummary};

/// Default lower bound added to the learned rate.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Where the rates `f_tau`, `f_phi` come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GateMode {
    /// Learned recurrent gate core (the normal mode).
    #[default]
    Recurrent,
    /// `f_tau = c`, `f_phi = c·q·k/√D`, one Euler step of length `1/c`.
    /// The final logit is the scaled dot product.
    FrozenSdpa { f_tau: f64 },
    /// `f_tau = 1/τ`, `f_phi = tanh(u·w + b)/τ`, no recurrence and no time input.
    LeakyIntegrator { tau: f64, w_phi: Vec<f64>, b_phi: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanConfig {
    pub d_model: usize,
    pub heads: usize,
    pub euler_steps: usize,
    pub top_k: TopK,
    pub epsilon: f64,
    pub sink_gate: bool,
    pub causal: bool,
    /// Length of the integration interval; `dt_nominal = horizon / N`.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub gate_mode: GateMode,
}

fn default_horizon() -> f64 {
    1.0
}

impl LanConfig {
    pub fn new(d_model: usize, heads: usize, euler_steps: usize, top_k: TopK) -> Self {
        Self {
            d_model,
            heads,
            euler_steps,
            top_k,
            epsilon: DEFAULT_EPSILON,
            sink_gate: false,
            causal: false,
            horizon: 1.0,
            gate_mode: GateMode::Recurrent,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.euler_steps == 0 {
            return fail("euler_steps must be at least 1".into());
        }
        if !(self.epsilon > 0.0) {
            return fail(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return fail(format!("horizon must be positive, got {}", self.horizon));
        }
        if self.top_k == TopK::K(0) {
            return fail("top_k must be at least 1".into());
        }
        match &self.gate_mode {
            GateMode::Recurrent => {}
            GateMode::FrozenSdpa { f_tau } if !(*f_tau > 0.0) => return fail(format!("frozen rate must be positive, got {f_tau}")),
            GateMode::FrozenSdpa { .. } => {}
            GateMode::LeakyIntegrator { tau, w_phi, .. } => {
                if !(*tau > 0.0) {
                    return fail(format!("tau must be positive, got {tau}"));
                }
                if w_phi.len() != 2 * self.head_dim() {
                    return fail(format!("w_phi has {} entries, expected {}", w_phi.len(), 2 * self.head_dim()));
                }
            }
        }
        Ok(())
    }

    pub fn dt_nominal(&self) -> f64 {
        match self.gate_mode {
            GateMode::FrozenSdpa { f_tau } => 1.0 / f_tau,
            _ => self.horizon / self.euler_steps as f64,
        }
    }
}

/// Result of one attention head.
#[derive(Debug, Clone)]
pub struct HeadOutput<'g> {
    /// `[B, T_q, D_v]`
    pub output: Var<'g>,
    /// `[B, T_q, K_eff]`, zero on invalid slots.
    pub weights: Var<'g>,
    pub selection: PairSelection,
    pub dt: f64,
    pub trajectory: Option<LogitTrajectory>,
}

/// Per-step `(f_tau, f_phi)` for all pairs, each `[pairs, 1]`.
fn gate_values<'g>(
    g: &'g Graph,
    params: &Params,
    core: &GateCore,
    cfg: &LanConfig,
    q_sel: &Var<'g>,
    k_sel: &Var<'g>,
) -> Result<Vec<(Var<'g>, Var<'g>)>> {
    let pairs = q_sel.shape()[0];
    let d = q_sel.shape()[1];
    if core.head_dim != d {
        return Err(Error::Config(format!("gate core built for head dim {}, got {d}", core.head_dim)));
    }
    match &cfg.gate_mode {
        GateMode::Recurrent => {
            let u = concat(&[q_sel.clone(), k_sel.clone()], 1)?;
            let projected = core.project_input(g, params, &u)?;
            drop(u);
            let dt_nominal = cfg.dt_nominal();
            let mut hidden = core.initial_hidden(g, pairs);
            let mut out = Vec::with_capacity(cfg.euler_steps);
            for n in 0..cfg.euler_steps {
                let step = core.step(g, params, &projected, n as f64 * dt_nominal, &hidden)?;
                hidden = step.hidden;
                out.push((step.f_tau, step.f_phi));
            }
            Ok(out)
        }
        GateMode::FrozenSdpa { f_tau } => {
            let score = q_sel.mul(k_sel)?.sum_axis(1)?.reshape(&[pairs, 1])?.scale(1.0 / (d as f64).sqrt());
            let rate = g.constant(Tensor::full(&[pairs, 1], *f_tau));
            Ok(vec![(rate, score.scale(*f_tau))])
        }
        GateMode::LeakyIntegrator { tau, w_phi, b_phi } => {
            let u = concat(&[q_sel.clone(), k_sel.clone()], 1)?;
            let w = g.constant(Tensor::new(&[2 * d, 1], w_phi.clone())?);
            let b = g.constant(Tensor::new(&[1], vec![*b_phi])?);
            let inv_tau = 1.0 / tau;
            let drive = u.matmul(&w)?.add_row(&b)?.tanh().scale(inv_tau);
            let rate = g.constant(Tensor::full(&[pairs, 1], inv_tau));
            Ok(vec![(rate, drive); cfg.euler_steps])
        }
    }
}

/// Liquid attention for one head.
///
/// `q: [B, T_q, D]`, `k: [B, T_k, D]`, `v: [B, T_k, D_v]`. `key_valid`
/// (length `B·T_k`) masks padded keys. The Euler step is clamped once per
/// call using the largest rate over all valid pairs and steps; the clamp is
/// not differentiated.
#[allow(clippy::too_many_arguments)]
pub fn lan_head_forward<'g>(
    g: &'g Graph,
    params: &Params,
    core: &GateCore,
    cfg: &LanConfig,
    q: &Var<'g>,
    k: &Var<'g>,
    v: &Var<'g>,
    key_valid: Option<&[bool]>,
    record: bool,
) -> Result<HeadOutput<'g>> {
    cfg.validate()?;
    let (b, tq, d) = match q.shape() {
        &[b, tq, d] => (b, tq, d),
        s => return Err(crate::error::invalid(format!("queries must be [B, T, D], got {s:?}"))),
    };
    let (tk, dv) = match (k.shape(), v.shape()) {
        (&[kb, tk, kd], &[vb, vt, dv]) if kb == b && vb == b && kd == d && vt == tk => (tk, dv),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "lan_head_forward",
                lhs: k.shape().to_vec(),
                rhs: v.shape().to_vec(),
            })
        }
    };
    let sel = select_pairs(q.value(), k.value(), cfg.top_k, cfg.causal, key_valid)?;
    let pairs = sel.num_pairs();
    let q_sel = q.reshape(&[b * tq, d])?.gather_rows(sel.query_rows())?;
    let k_sel = k.reshape(&[b * tk, d])?.gather_rows(sel.key_rows())?;
    let gates = gate_values(g, params, core, cfg, &q_sel, &k_sel)?;
    drop((q_sel, k_sel));

    let mut max_rate = 0.0f64;
    for (f_tau, _) in &gates {
        for (x, &ok) in f_tau.value().data().iter().zip(&sel.valid) {
            if ok {
                max_rate = max_rate.max(*x);
            }
        }
    }
    let dt = if max_rate > 0.0 {
        clamp_dt(cfg.dt_nominal(), &[max_rate])?
    } else {
        cfg.dt_nominal()
    };

    let mut a = g.constant(Tensor::zeros(&[pairs, 1]));
    let mut trace_a = Vec::new();
    if record {
        trace_a.push(a.value().clone());
    }
    for (f_tau, f_phi) in &gates {
        a = euler_step_var(&a, f_tau, f_phi, dt)?;
        if record {
            trace_a.push(a.value().clone());
        }
    }
    let trajectory = if record {
        let ft: Vec<Tensor> = gates.iter().map(|(t, _)| t.value().clone()).collect();
        let fp: Vec<Tensor> = gates.iter().map(|(_, p)| p.value().clone()).collect();
        Some(LogitTrajectory::from_steps(
            [b, tq, sel.keff],
            &trace_a,
            &ft,
            &fp,
            dt,
            sel.valid.clone(),
        )?)
    } else {
        None
    };
    drop(gates);

    let weights = a.reshape(&[b * tq, sel.keff])?.softmax(Some(sel.valid_mask()))?;
    let v_sel = v
        .reshape(&[b * tk, dv])?
        .gather_rows(sel.key_rows())?
        .reshape(&[b * tq, sel.keff, dv])?;
    let output = weights.reshape(&[b * tq, 1, sel.keff])?.matmul(&v_sel)?.reshape(&[b, tq, dv])?;
    Ok(HeadOutput {
        output,
        weights: weights.reshape(&[b, tq, sel.keff])?,
        selection: sel,
        dt,
        trajectory,
    })
}

/// `σ(x·W_s + b_s) ⊙ (heads·W_g + b_g)`.
pub fn sink_gate<'g>(g: &'g Graph, params: &Params, x: &Var<'g>, heads: &Var<'g>, proj: &Linear, gate: &Linear) -> Result<Var<'g>> {
    let scores = gate.forward(g, params, x)?.sigmoid();
    scores.mul(&proj.forward(g, params, heads)?)
}

/// Projections, per-head gate cores and the optional sink gate of one
/// liquid-attention block.
#[derive(Debug, Clone)]
pub struct LanLayer {
    pub cfg: LanConfig,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub sink: Option<Linear>,
    pub cores: Vec<GateCore>,
}

/// Output of [`LanLayer::forward`].
#[derive(Debug, Clone)]
pub struct LanOutput<'g> {
    /// `[B, T_q, d_model]`
    pub output: Var<'g>,
    pub heads: Vec<HeadOutput<'g>>,
}

impl LanLayer {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, cfg: LanConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let w_q = Linear::new(params, &format!("{name}.q"), d, d, rng);
        let w_k = Linear::new(params, &format!("{name}.k"), d, d, rng);
        let w_v = Linear::new(params, &format!("{name}.v"), d, d, rng);
        let w_o = Linear::new(params, &format!("{name}.o"), d, d, rng);
        let sink = cfg.sink_gate.then(|| Linear::zeros(params, &format!("{name}.sink"), d, d));
        let cores = (0..cfg.heads)
            .map(|h| GateCore::new(params, &format!("{name}.gate{h}"), cfg.head_dim(), cfg.epsilon, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            w_q,
            w_k,
            w_v,
            w_o,
            sink,
            cores,
        })
    }

    /// `x_q: [B, T_q, d_model]`, `x_k`, `x_v: [B, T_k, d_model]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        params: &Params,
        x_q: &Var<'g>,
        x_k: &Var<'g>,
        x_v: &Var<'g>,
        key_valid: Option<&[bool]>,
        record: bool,
    ) -> Result<LanOutput<'g>> {
        let dh = self.cfg.head_dim();
        let q = self.w_q.forward(g, params, x_q)?;
        let k = self.w_k.forward(g, params, x_k)?;
        let v = self.w_v.forward(g, params, x_v)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for (h, core) in self.cores.iter().enumerate() {
            let slice = |x: &Var<'g>| x.narrow(2, h * dh, dh);
            heads.push(lan_head_forward(
                g,
                params,
                core,
                &self.cfg,
                &slice(&q)?,
                &slice(&k)?,
                &slice(&v)?,
                key_valid,
                record,
            )?);
        }
        let parts: Vec<Var<'g>> = heads.iter().map(|h| h.output.clone()).collect();
        let joined = concat(&parts, 2)?;
        let output = match &self.sink {
            Some(gate) => sink_gate(g, params, x_q, &joined, &self.w_o, gate)?,
            None => self.w_o.forward(g, params, &joined)?,
        };
        Ok(LanOutput { output, heads })
    }
}

/// Multi-head liquid attention through `layer`.
pub fn multi_head_lan<'g>(g: &'g Graph, params: &Params, layer: &LanLayer, x_q: &Var<'g>, x_k: &Var<'g>, x_v: &Var<'g>) -> Result<Var<'g>> {
    Ok(layer.forward(g, params, x_q, x_k, x_v, None, false)?.output)
}
