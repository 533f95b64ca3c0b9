//! Executable checks of the logit dynamics: forward invariance of the
//! equilibrium interval, Euler stability under the step clamp, and the
//! softmax-attention and leaky-integrator limits.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{ct_rnn_integrate, euler_convergence, verify_ctrnn_limit, verify_sdpa_limit, CtRnnCell, LimitReport};
use crate::error::{invalid, Result};
use crate::lan::{clamp_dt, euler_step, GateMode};
use crate::tensor::Tensor;

pub const INVARIANCE_TOLERANCE: f64 = 1e-12;
pub const SDPA_TOLERANCE: f64 = 1e-6;
/// Allowed `C` in the `C·dt` deviation bound for the leaky-integrator limit.
pub const CTRNN_TOLERANCE_C: f64 = 1.0;
pub const CONVERGENCE_RATIO: (f64, f64) = (1.8, 2.2);
pub const ANALYTIC_REL_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, Serialize)]
pub struct InvarianceReport {
    pub trajectories: usize,
    /// Largest distance by which any state left `[A_min, A_max]`.
    pub max_excursion: f64,
    pub tolerance: f64,
    pub elapsed_s: f64,
    pub pass: bool,
}

/// Random bounded gates (`f_τ ∈ [ε, 50]`, `f_φ ∈ [−1, 1]`) integrated with the
/// clamped step from a start inside the equilibrium interval. Trajectories
/// are grouped into head calls of 100 pairs sharing one clamped step.
pub fn invariance_suite(trajectories: usize, seed: u64) -> Result<InvarianceReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let group = 100;
    let mut done = 0;
    let mut max_excursion = 0.0f64;
    while done < trajectories {
        let pairs = group.min(trajectories - done);
        let steps = rng.gen_range(1..=40);
        let horizon = rng.gen_range(0.1..20.0);
        let f_tau: Vec<Tensor> = (0..steps)
            .map(|_| Tensor::from_fn(&[pairs], |_| rng.gen_range(1e-3..50.0)))
            .collect();
        let f_phi: Vec<Tensor> = (0..steps)
            .map(|_| Tensor::from_fn(&[pairs], |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let all_tau: Vec<f64> = f_tau.iter().flat_map(|t| t.data().iter().copied()).collect();
        let dt = clamp_dt(horizon / steps as f64, &all_tau)?;
        let bounds: Vec<(f64, f64)> = (0..pairs)
            .map(|p| {
                (0..steps)
                    .map(|n| f_phi[n].data()[p] / f_tau[n].data()[p])
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e), hi.max(e)))
            })
            .collect();
        let mut a = Tensor::from_fn(&[pairs], |p| rng.gen_range(bounds[p].0..=bounds[p].1));
        for n in 0..=steps {
            for (p, &x) in a.data().iter().enumerate() {
                let (lo, hi) = bounds[p];
                max_excursion = max_excursion.max(lo - x).max(x - hi);
            }
            if n < steps {
                a = euler_step(&a, &f_tau[n], &f_phi[n], dt)?;
            }
        }
        done += pairs;
    }
    Ok(InvarianceReport {
        trajectories,
        max_excursion,
        tolerance: INVARIANCE_TOLERANCE,
        elapsed_s: start.elapsed().as_secs_f64(),
        pass: max_excursion <= INVARIANCE_TOLERANCE,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    pub trials: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
    /// `|a_50| / |a_0|` with the clamp disabled and `dt·f_τ = 2.5`.
    pub unclamped_growth: f64,
    pub pass: bool,
}

/// Step factors `α = dt·f_τ` under the clamp, and the divergence witness
/// without it.
pub fn stability_suite(trials: usize, seed: u64) -> Result<StabilityReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..trials {
        let gates: Vec<f64> = (0..rng.gen_range(1..64)).map(|_| rng.gen_range(1e-3..1e3)).collect();
        let dt = clamp_dt(rng.gen_range(1e-3..10.0), &gates)?;
        for g in &gates {
            lo = lo.min(dt * g);
            hi = hi.max(dt * g);
        }
    }
    let one = Tensor::ones(&[1]);
    let mut a = one.clone();
    for _ in 0..50 {
        a = euler_step(&a, &one, &Tensor::zeros(&[1]), 2.5)?;
    }
    let unclamped_growth = a.item().abs();
    Ok(StabilityReport {
        trials,
        alpha_min: lo,
        alpha_max: hi,
        unclamped_growth,
        pass: lo >= 0.0 && hi <= 1.0 && unclamped_growth >= 10.0,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub error_dt: f64,
    pub error_half_dt: f64,
    pub ratio: f64,
    pub ratio_bounds: (f64, f64),
    /// Largest deviation from `σ(1 − e^{−t})` over `t ∈ [0, 5]`, relative to `σ`.
    pub analytic_rel_gap: f64,
    pub pass: bool,
}

/// Order-one convergence at `t = 1` and closeness to the exact curve on
/// `[0, 5]` for `τ = 1`.
pub fn convergence_suite() -> Result<ConvergenceReport> {
    let (e1, e2) = euler_convergence(1.0, 0.8, 1.0, 0.01)?;
    let ratio = e1 / e2;
    let sigma = 0.8;
    let cell = CtRnnCell::new(1.0, vec![vec![0.0]], vec![f64::atanh(sigma)])?;
    let path = ct_rnn_integrate(&cell, &[vec![0.0]], 0.1, 50)?;
    let gap = path
        .iter()
        .enumerate()
        .map(|(n, h)| (h[0] - sigma * (1.0 - (-(n as f64) * 0.1).exp())).abs() / sigma)
        .fold(0.0, f64::max);
    Ok(ConvergenceReport {
        error_dt: e1,
        error_half_dt: e2,
        ratio,
        ratio_bounds: CONVERGENCE_RATIO,
        analytic_rel_gap: gap,
        pass: (CONVERGENCE_RATIO.0..=CONVERGENCE_RATIO.1).contains(&ratio) && gap <= ANALYTIC_REL_TOLERANCE,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LimitsReport {
    pub sdpa: LimitReport,
    pub ctrnn: LimitReport,
    pub convergence: ConvergenceReport,
    /// Learned gates must not collapse onto softmax attention.
    pub learned_gap: f64,
    pub pass: bool,
}

pub fn limits_suite(seed: u64) -> Result<LimitsReport> {
    let sdpa = verify_sdpa_limit(100, seed, SDPA_TOLERANCE, &GateMode::FrozenSdpa { f_tau: 1.0 })?;
    let ctrnn = verify_ctrnn_limit(100, seed, CTRNN_TOLERANCE_C)?;
    let convergence = convergence_suite()?;
    let learned = verify_sdpa_limit(20, seed, SDPA_TOLERANCE, &GateMode::Recurrent)?;
    Ok(LimitsReport {
        pass: sdpa.pass && ctrnn.pass && convergence.pass && !learned.pass,
        learned_gap: learned.max_gap,
        sdpa,
        ctrnn,
        convergence,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub pass: bool,
    pub reports: serde_json::Value,
}

pub const SUITES: [&str; 4] = ["invariance", "stability", "limits", "all"];

/// Runs a named suite and collects its reports as JSON.
pub fn run_suite(name: &str, seed: u64) -> Result<SuiteReport> {
    let mut reports = serde_json::Map::new();
    let mut pass = true;
    let mut add = |key: &str, ok: bool, v: serde_json::Value| {
        pass &= ok;
        reports.insert(key.to_string(), v);
    };
    let all = name == "all";
    if !SUITES.contains(&name) {
        return Err(invalid(format!("unknown suite {name:?}; expected one of {SUITES:?}")));
    }
    if all || name == "invariance" {
        let r = invariance_suite(10_000, seed)?;
        add("invariance", r.pass, serde_json::to_value(&r)?);
    }
    if all || name == "stability" {
        let r = stability_suite(10_000, seed)?;
        add("stability", r.pass, serde_json::to_value(&r)?);
    }
    if all || name == "limits" {
        let r = limits_suite(seed)?;
        add("limits", r.pass, serde_json::to_value(&r)?);
    }
    Ok(SuiteReport {
        suite: name.to_string(),
        pass,
        reports: serde_json::Value::Object(reports),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariance_holds_on_a_small_battery() {
        let r = invariance_suite(500, 1).unwrap();
        assert_eq!(r.trajectories, 500);
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn unclamped_step_breaks_invariance() {
        // dt·f_τ = 2.5 overshoots the equilibrium 0 and grows as 1.5ⁿ
        let r = stability_suite(100, 2).unwrap();
        assert!(r.pass, "{r:?}");
        assert!((r.unclamped_growth - 1.5f64.powi(50)).abs() < 1e-6 * 1.5f64.powi(50));
    }

    #[test]
    fn limits_pass() {
        let r = limits_suite(3).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.ctrnn.max_gap, 0.0);
    }

    #[test]
    fn unknown_suite_is_rejected() {
        assert!(run_suite("everything", 0).is_err());
    }

    #[test]
    fn stability_suite_json_names() {
        let r = run_suite("stability", 0).unwrap();
        assert!(r.pass);
        assert!(r.reports["stability"]["alpha_max"].as_f64().unwrap() <= 1.0);
    }
}
