//! Central-difference gradient verification.

use serde::Serialize;

use crate::autograd::{Graph, ParamId, Params, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so that near-zero gradients
/// are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_error: f64,
    /// max over entries of |analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    fn new() -> Self {
        Self {
            checked: 0,
            max_abs_error: 0.0,
            max_rel_error: 0.0,
            worst: None,
        }
    }

    fn record(&mut self, name: &str, index: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        self.max_abs_error = self.max_abs_error.max(abs);
        if rel > self.max_rel_error || !rel.is_finite() {
            self.max_rel_error = rel;
            self.worst = Some((name.to_string(), index));
        }
    }
}

/// Checks `f`'s gradient with respect to every entry of every input tensor.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&[Var<'g>]) -> Result<Var<'g>>,
{
    let mut params = Params::new();
    let ids: Vec<ParamId> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| params.add(format!("input{i}"), t.clone()))
        .collect();
    let all: Vec<(ParamId, Vec<usize>)> = ids.iter().map(|&id| (id, (0..params.get(id).numel()).collect())).collect();
    check_param_gradients(&mut params, &all, h, |g, p| {
        let vars: Vec<Var<'_>> = ids.iter().map(|&id| g.param(p, id)).collect();
        f(&vars)
    })
}

/// Checks the gradient of a scalar function of `params` at the listed
/// entries, perturbing each by ±`h` in place and restoring it afterwards.
pub fn check_param_gradients<F>(params: &mut Params, entries: &[(ParamId, Vec<usize>)], h: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &Params) -> Result<Var<'g>>,
{
    if h <= 0.0 {
        return Err(invalid("finite-difference step must be positive"));
    }
    let grads = {
        let g = Graph::new();
        let root = f(&g, params)?;
        g.backward(&root)?
    };
    let eval = |p: &Params| -> Result<f64> {
        let g = Graph::no_grad();
        let v = f(&g, p)?;
        Ok(v.value().item())
    };
    let mut report = GradCheckReport::new();
    for (id, indices) in entries {
        let analytic = grads.get_or_zeros(params, *id);
        let name = params.name(*id).to_string();
        for &i in indices {
            let orig = params.get(*id).data()[i];
            params.get_mut(*id).data_mut()[i] = orig + h;
            let plus = eval(params)?;
            params.get_mut(*id).data_mut()[i] = orig - h;
            let minus = eval(params)?;
            params.get_mut(*id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            report.record(&name, i, analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_at_three() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let r = check_gradients(&[x], 1e-5, |v| Ok(v[0].square().sum())).unwrap();
        assert_eq!(r.checked, 1);
        assert!(r.max_abs_error < 1e-6);
    }

    #[test]
    fn linear_map_is_exact_to_rounding() {
        let x = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.25 - 0.5);
        let w = Tensor::from_fn(&[3, 2], |i| 1.0 - i as f64 * 0.3);
        let r = check_gradients(&[x, w], 1e-5, |v| Ok(v[0].matmul(&v[1])?.sum())).unwrap();
        assert!(r.max_abs_error < 1e-9, "{r:?}");
    }

    #[test]
    fn nonpositive_step_rejected() {
        let mut p = Params::new();
        let id = p.add("p", Tensor::ones(&[1]));
        let res = check_param_gradients(&mut p, &[(id, vec![0])], 0.0, |g, p| Ok(g.param(p, id).sum()));
        assert!(res.is_err());
    }
}
