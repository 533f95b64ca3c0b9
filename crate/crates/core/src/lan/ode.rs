//! Logit ODE `ȧ = −f_tau·a + f_phi`: explicit Euler steps, the step clamp,
//! and recorded trajectories.

use std::io::Write;

use serde::Serialize;

use crate::autograd::Var;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// `a + dt·(f_phi − f_tau·a)`, elementwise.
pub fn euler_step(a: &Tensor, f_tau: &Tensor, f_phi: &Tensor, dt: f64) -> Result<Tensor> {
    if a.shape() != f_tau.shape() || a.shape() != f_phi.shape() {
        return Err(Error::ShapeMismatch {
            op: "euler_step",
            lhs: a.shape().to_vec(),
            rhs: f_tau.shape().to_vec(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(f_tau.data())
        .zip(f_phi.data())
        .map(|((&a, &ft), &fp)| a + (fp - ft * a) * dt)
        .collect();
    Tensor::new(a.shape(), data)
}

/// Taped version of [`euler_step`] with the same operation order.
pub fn euler_step_var<'g>(a: &Var<'g>, f_tau: &Var<'g>, f_phi: &Var<'g>, dt: f64) -> Result<Var<'g>> {
    a.add(&f_phi.sub(&f_tau.mul(a)?)?.scale(dt))
}

/// `min(dt_nominal, 1/max f_tau)`, so that `dt·f_tau ≤ 1` for every entry.
pub fn clamp_dt(dt_nominal: f64, f_tau: &[f64]) -> Result<f64> {
    if !(dt_nominal > 0.0) || !dt_nominal.is_finite() {
        return Err(invalid(format!("nominal step must be positive, got {dt_nominal}")));
    }
    let mut max = 0.0f64;
    for &x in f_tau {
        if !(x > 0.0) || !x.is_finite() {
            return Err(invalid(format!("rate entries must be positive and finite, got {x}")));
        }
        max = max.max(x);
    }
    if max == 0.0 {
        return Ok(dt_nominal);
    }
    Ok(dt_nominal.min(1.0 / max))
}

/// Recorded logit paths of one attention head.
///
/// `a` is `[B, T_q, K_eff, N+1]` with `a[..., 0] = 0`; `f_tau` and `f_phi`
/// are `[B, T_q, K_eff, N]`.
#[derive(Debug, Clone)]
pub struct LogitTrajectory {
    pub a: Tensor,
    pub f_tau: Tensor,
    pub f_phi: Tensor,
    pub dt_effective: Vec<f64>,
    pub valid: Vec<bool>,
}

/// Range statistics of a trajectory, used in divergence diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectorySummary {
    pub dt: f64,
    pub f_tau_min: f64,
    pub f_tau_max: f64,
    pub f_phi_min: f64,
    pub f_phi_max: f64,
    pub a_abs_max: f64,
    pub finite: bool,
}

impl LogitTrajectory {
    /// Assembles per-step `[pairs, 1]` values into the `[B, T_q, K_eff, ·]` layout.
    pub fn from_steps(lead: [usize; 3], a: &[Tensor], f_tau: &[Tensor], f_phi: &[Tensor], dt: f64, valid: Vec<bool>) -> Result<Self> {
        let steps = f_tau.len();
        if a.len() != steps + 1 || f_phi.len() != steps {
            return Err(invalid("trajectory needs N+1 logit states and N gate values"));
        }
        let pairs: usize = lead.iter().product();
        let interleave = |cols: &[Tensor]| -> Result<Tensor> {
            let n = cols.len();
            let mut data = vec![0.0; pairs * n];
            for (s, col) in cols.iter().enumerate() {
                if col.numel() != pairs {
                    return Err(invalid("trajectory step has the wrong number of pairs"));
                }
                for (p, &x) in col.data().iter().enumerate() {
                    data[p * n + s] = x;
                }
            }
            Tensor::new(&[lead[0], lead[1], lead[2], n], data)
        };
        Ok(Self {
            a: interleave(a)?,
            f_tau: interleave(f_tau)?,
            f_phi: interleave(f_phi)?,
            dt_effective: vec![dt; steps],
            valid,
        })
    }

    pub fn steps(&self) -> usize {
        self.dt_effective.len()
    }

    pub fn pairs(&self) -> usize {
        self.valid.len()
    }

    pub fn summary(&self) -> TrajectorySummary {
        let range = |t: &Tensor| {
            t.data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
        };
        let (f_tau_min, f_tau_max) = range(&self.f_tau);
        let (f_phi_min, f_phi_max) = range(&self.f_phi);
        TrajectorySummary {
            dt: self.dt_effective.first().copied().unwrap_or(0.0),
            f_tau_min,
            f_tau_max,
            f_phi_min,
            f_phi_max,
            a_abs_max: self.a.data().iter().fold(0.0, |m, x| m.max(x.abs())),
            finite: self.a.all_finite() && self.f_tau.all_finite() && self.f_phi.all_finite(),
        }
    }

    /// CSV with columns `step,pair_id,a,f_tau,f_phi`; the gate columns are
    /// empty on the final state.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "pair_id", "a", "f_tau", "f_phi"])?;
        let n = self.steps();
        for p in 0..self.pairs() {
            for s in 0..=n {
                let a = self.a.data()[p * (n + 1) + s].to_string();
                let (ft, fp) = if s < n {
                    (self.f_tau.data()[p * n + s].to_string(), self.f_phi.data()[p * n + s].to_string())
                } else {
                    (String::new(), String::new())
                };
                out.write_record([s.to_string(), p.to_string(), a, ft, fp])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}
