//! Stand-alone scaled dot-product attention and leaky-integrator RNN, plus
//! the verifiers that compare liquid attention against them.
//!
//! The references are plain loops over slices and share no kernels with
//! the attention code.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Params};
use crate::error::{invalid, Result};
use crate::lan::{lan_head_forward, GateCore, GateMode, LanConfig, DEFAULT_EPSILON};
use crate::sparse::TopK;
use crate::tensor::Tensor;

/// Softmax attention for one head: `q: [T_q, d]`, `k: [T_k, d]`, `v: [T_k, d_v]`.
/// Returns `(output [T_q, d_v], weights [T_q, T_k])`.
pub fn sdpa_reference(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let (tq, d) = match q.shape() {
        &[a, b] => (a, b),
        s => return Err(invalid(format!("queries must be [T, d], got {s:?}"))),
    };
    let (tk, dv) = match (k.shape(), v.shape()) {
        (&[tk, kd], &[vt, dv]) if kd == d && vt == tk && tk > 0 => (tk, dv),
        _ => return Err(invalid(format!("keys {:?} and values {:?} do not match", k.shape(), v.shape()))),
    };
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = vec![0.0; tq * tk];
    let mut out = vec![0.0; tq * dv];
    for i in 0..tq {
        let mut logits = vec![0.0; tk];
        for (j, l) in logits.iter_mut().enumerate() {
            let mut s = 0.0;
            for c in 0..d {
                s += qd[i * d + c] * kd[j * d + c];
            }
            *l = s * scale;
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - m).exp();
            z += *l;
        }
        for j in 0..tk {
            let a = logits[j] / z;
            weights[i * tk + j] = a;
            for c in 0..dv {
                out[i * dv + c] += a * vd[j * dv + c];
            }
        }
    }
    Ok((Tensor::new(&[tq, dv], out)?, Tensor::new(&[tq, tk], weights)?))
}

/// `τ ḣ = −h + tanh(W_φ u + b_φ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtRnnCell {
    pub tau: f64,
    /// `[units][inputs]`
    pub w_phi: Vec<Vec<f64>>,
    pub b_phi: Vec<f64>,
}

impl CtRnnCell {
    pub fn new(tau: f64, w_phi: Vec<Vec<f64>>, b_phi: Vec<f64>) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(invalid(format!("tau must be positive, got {tau}")));
        }
        if w_phi.len() != b_phi.len() {
            return Err(invalid("W_phi rows and b_phi length differ"));
        }
        Ok(Self { tau, w_phi, b_phi })
    }

    pub fn units(&self) -> usize {
        self.b_phi.len()
    }

    /// `tanh(W_φ u + b_φ)`, the fixed point for constant input.
    pub fn target(&self, u: &[f64]) -> Vec<f64> {
        self.w_phi
            .iter()
            .zip(&self.b_phi)
            .map(|(row, b)| {
                let mut z = 0.0;
                for (x, w) in u.iter().zip(row) {
                    z += x * w;
                }
                (z + b).tanh()
            })
            .collect()
    }
}

/// Relative rounding allowance on `dt ≤ τ`, so a step of `1/(1/τ)` is accepted.
const STEP_SLACK: f64 = 1e-12;

/// Explicit Euler from `h₀ = 0`. `u_series` holds one input per step, or a
/// single input used at every step. Returns `n_steps + 1` states.
pub fn ct_rnn_integrate(cell: &CtRnnCell, u_series: &[Vec<f64>], dt: f64, n_steps: usize) -> Result<Vec<Vec<f64>>> {
    let inv_tau = 1.0 / cell.tau;
    if !(dt > 0.0) || dt * inv_tau > 1.0 + STEP_SLACK {
        return Err(invalid(format!("step {dt} must lie in (0, tau = {}]", cell.tau)));
    }
    if u_series.is_empty() || (u_series.len() != 1 && u_series.len() < n_steps) {
        return Err(invalid("need one input per step or a single constant input"));
    }
    let mut h = vec![0.0; cell.units()];
    let mut path = vec![h.clone()];
    for n in 0..n_steps {
        let u = &u_series[if u_series.len() == 1 { 0 } else { n }];
        let s = cell.target(u);
        h = h.iter().zip(&s).map(|(&h, &s)| h + (inv_tau * s - inv_tau * h) * dt).collect();
        path.push(h.clone());
    }
    Ok(path)
}

/// Verifier outcome, emitted as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct LimitReport {
    pub name: String,
    pub battery_size: usize,
    pub max_gap: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl LimitReport {
    pub fn new(name: &str, battery_size: usize, max_gap: f64, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            battery_size,
            max_gap,
            tolerance,
            pass: max_gap.is_finite() && max_gap <= tolerance,
        }
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// Compares a single liquid-attention head with [`sdpa_reference`] on
/// `battery` random instances. With [`GateMode::FrozenSdpa`] the gap should
/// vanish; with learned gates it should not.
pub fn verify_sdpa_limit(battery: usize, seed: u64, tolerance: f64, gates: &GateMode) -> Result<LimitReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_gap = 0.0f64;
    for _ in 0..battery {
        let d = 2 * rng.gen_range(1..5);
        let (tq, tk, dv) = (rng.gen_range(1..7), rng.gen_range(1..9), rng.gen_range(1..5));
        let q = random_tensor(&mut rng, &[1, tq, d], 2.0);
        let k = random_tensor(&mut rng, &[1, tk, d], 2.0);
        let v = random_tensor(&mut rng, &[1, tk, dv], 1.0);
        let mut cfg = LanConfig::new(d, 1, 5, TopK::Full);
        cfg.gate_mode = match gates {
            GateMode::FrozenSdpa { .. } => GateMode::FrozenSdpa {
                f_tau: rng.gen_range(0.25..4.0),
            },
            other => other.clone(),
        };
        let mut params = Params::new();
        let core = GateCore::new(&mut params, "gate", d, DEFAULT_EPSILON, &mut rng)?;
        let g = Graph::no_grad();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = lan_head_forward(&g, &params, &core, &cfg, &qv, &kv, &vv, None, false)?;
        let (want, _) = sdpa_reference(&q.reshape(&[tq, d])?, &k.reshape(&[tk, d])?, &v.reshape(&[tk, dv])?)?;
        max_gap = max_gap.max(out.output.value().reshape(&[tq, dv])?.max_abs_diff(&want));
    }
    Ok(LimitReport::new("sdpa_limit", battery, max_gap, tolerance))
}

/// Compares the logit paths of a fixed-rate, feedforward-drive head with
/// [`ct_rnn_integrate`] on the same pair inputs and step. `tolerance_c`
/// scales the allowed `C·dt` deviation.
pub fn verify_ctrnn_limit(battery: usize, seed: u64, tolerance_c: f64) -> Result<LimitReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_gap = 0.0f64;
    let mut tolerance = f64::INFINITY;
    for _ in 0..battery {
        let d = rng.gen_range(1..4);
        let t = rng.gen_range(1..5);
        let steps = rng.gen_range(1..12);
        let tau = rng.gen_range(0.2..3.0);
        let w_phi: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b_phi = rng.gen_range(-0.5..0.5);
        let x = random_tensor(&mut rng, &[1, t, d], 1.5);
        let mut cfg = LanConfig::new(d, 1, steps, TopK::Full);
        cfg.horizon = rng.gen_range(0.5..3.0);
        cfg.gate_mode = GateMode::LeakyIntegrator {
            tau,
            w_phi: w_phi.clone(),
            b_phi,
        };
        let mut params = Params::new();
        let core = GateCore::new(&mut params, "gate", d, DEFAULT_EPSILON, &mut rng)?;
        let g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let out = lan_head_forward(&g, &params, &core, &cfg, &xv, &xv, &xv, None, true)?;
        let traj = out.trajectory.ok_or_else(|| invalid("trajectory was not recorded"))?;
        let cell = CtRnnCell::new(tau, vec![w_phi], vec![b_phi])?;
        tolerance = tolerance.min(tolerance_c * out.dt);
        for i in 0..t {
            for j in 0..t {
                let mut u = x.data()[i * d..(i + 1) * d].to_vec();
                u.extend_from_slice(&x.data()[j * d..(j + 1) * d]);
                let path = ct_rnn_integrate(&cell, &[u], out.dt, steps)?;
                let pair = i * t + j;
                for (s, h) in path.iter().enumerate() {
                    let a = traj.a.data()[pair * (steps + 1) + s];
                    max_gap = max_gap.max((a - h[0]).abs());
                }
            }
        }
    }
    Ok(LimitReport::new("ctrnn_limit", battery, max_gap, tolerance))
}

/// Error of the Euler leaky integrator at time `t_end` against the analytic
/// `h(t) = σ(1 − e^{−t/τ})`, for step `dt` and `dt/2`. Returns
/// `(error(dt), error(dt/2))`.
pub fn euler_convergence(tau: f64, sigma: f64, t_end: f64, dt: f64) -> Result<(f64, f64)> {
    let cell = CtRnnCell::new(tau, vec![vec![0.0]], vec![sigma.atanh()])?;
    let exact = sigma * (1.0 - (-t_end / tau).exp());
    let err = |h: f64| -> Result<f64> {
        let n = (t_end / h).round() as usize;
        let path = ct_rnn_integrate(&cell, &[vec![0.0]], h, n)?;
        Ok((path[n][0] - exact).abs())
    };
    Ok((err(dt)?, err(dt / 2.0)?))
}
