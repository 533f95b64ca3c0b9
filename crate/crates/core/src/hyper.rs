//! Hyper-connections: `n` parallel hidden streams mixed around each sublayer.
//!
//! Per token the state is `H: [n, d]`. A sublayer `L` reads the aggregate
//! `x₀ = A_mᵀ H` and writes back `Ĥ = Bᵀ L(x₀) + A_rᵀ H`. Liquid
//! hyper-connections shift `B`, `A_m`, `A_r` by small input-dependent terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Graph, ParamId, Params, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{uniform, LayerNorm, LAYER_NORM_EPS};
use crate::tensor::Tensor;

/// How sublayer outputs are merged into the hidden state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HcMode {
    /// Plain `x + L(x)`.
    Residual,
    Static {
        n: usize,
    },
    Liquid {
        n: usize,
    },
}

impl HcMode {
    pub fn streams(self) -> usize {
        match self {
            HcMode::Residual => 1,
            HcMode::Static { n } | HcMode::Liquid { n } => n,
        }
    }
}

pub const LIQUID_SCALE_INIT: f64 = 1e-2;

/// Input-dependent projections of a liquid hyper-connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiquidHc {
    /// `[d, 1]`
    pub w_b: ParamId,
    /// `[d, 1]`
    pub w_m: ParamId,
    /// `[d, n]`, one row of `A_r` per stream
    pub w_r: ParamId,
    /// `[1]`
    pub s_b: ParamId,
    /// `[1]`
    pub s_a: ParamId,
}

/// `B: [n]`, `A_m: [n]`, `A_r: [n, n]` and optional liquid terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HcParams {
    pub n: usize,
    pub d: usize,
    pub b: ParamId,
    pub a_m: ParamId,
    pub a_r: ParamId,
    pub liquid: Option<LiquidHc>,
}

impl HcParams {
    /// `B = 1`, `A_m = 1/n`, `A_r = I`.
    pub fn new<R: Rng + ?Sized>(params: &mut Params, name: &str, n: usize, d: usize, liquid: bool, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(invalid("hyper-connections need at least one stream"));
        }
        let b = params.add(format!("{name}.B"), Tensor::ones(&[n]));
        let a_m = params.add(format!("{name}.A_m"), Tensor::full(&[n], 1.0 / n as f64));
        let a_r = params.add(format!("{name}.A_r"), Tensor::eye(n));
        let liquid = liquid.then(|| {
            let bound = 1.0 / (d as f64).sqrt();
            LiquidHc {
                w_b: params.add(format!("{name}.W_b"), uniform(rng, &[d, 1], bound)),
                w_m: params.add(format!("{name}.W_m"), uniform(rng, &[d, 1], bound)),
                w_r: params.add(format!("{name}.W_r"), uniform(rng, &[d, n], bound)),
                s_b: params.add(format!("{name}.s_b"), Tensor::full(&[1], LIQUID_SCALE_INIT)),
                s_a: params.add(format!("{name}.s_a"), Tensor::full(&[1], LIQUID_SCALE_INIT)),
            }
        });
        Ok(Self { n, d, b, a_m, a_r, liquid })
    }
}

/// Effective coefficients in matmul-ready layout.
///
/// Static: `b: [n, 1]`, `a_m: [1, n]`, `a_r_t: [n, n]`. Liquid: the same
/// with the state's leading dims prepended.
#[derive(Debug, Clone)]
pub struct HcCoeffs<'g> {
    pub b: Var<'g>,
    pub a_m: Var<'g>,
    /// `A_rᵀ`
    pub a_r_t: Var<'g>,
}

/// Replicates `x: [.., d]` into `n` streams `[.., n, d]`.
pub fn hc_expand<'g>(x: &Var<'g>, n: usize) -> Result<Var<'g>> {
    let mut shape = x.shape().to_vec();
    let d = shape.pop().ok_or_else(|| invalid("cannot expand a scalar"))?;
    shape.extend([1, d]);
    let one = x.reshape(&shape)?;
    concat(&vec![one; n], shape.len() - 2)
}

fn check_state(hc: &HcParams, h: &Var<'_>) -> Result<usize> {
    let s = h.shape();
    if s.len() < 2 || s[s.len() - 2] != hc.n || s[s.len() - 1] != hc.d {
        return Err(Error::ShapeMismatch {
            op: "hyper-connection state",
            lhs: s.to_vec(),
            rhs: vec![hc.n, hc.d],
        });
    }
    Ok(s.len() - 2)
}

pub fn hc_static_coeffs<'g>(g: &'g Graph, params: &Params, hc: &HcParams) -> Result<HcCoeffs<'g>> {
    let n = hc.n;
    Ok(HcCoeffs {
        b: g.param(params, hc.b).reshape(&[n, 1])?,
        a_m: g.param(params, hc.a_m).reshape(&[1, n])?,
        a_r_t: g.param(params, hc.a_r).transpose()?,
    })
}

/// `B' = B + s_b·tanh(X̃W_b)`, `A_m' = A_m + s_a·tanh(X̃W_m)`,
/// `A_r' = A_r + s_a·tanh(X̃W_r)` with `X̃` the unscaled layer norm of each
/// stream.
pub fn hc_liquid_params<'g>(g: &'g Graph, params: &Params, hc: &HcParams, h: &Var<'g>) -> Result<HcCoeffs<'g>> {
    let lq = hc.liquid.ok_or_else(|| invalid("hyper-connection has no liquid parameters"))?;
    let lead = check_state(hc, h)?;
    let n = hc.n;
    let lead_dims = h.shape()[..lead].to_vec();
    let with = |tail: &[usize]| -> Vec<usize> { lead_dims.iter().chain(tail).copied().collect() };
    let norm = h.layer_norm(LAYER_NORM_EPS)?;
    let s_b = g.param(params, lq.s_b);
    let s_a = g.param(params, lq.s_a);
    let shift = |w: ParamId, s: &Var<'g>, tail: &[usize]| -> Result<Var<'g>> {
        norm.matmul(&g.param(params, w))?.tanh().mul(s)?.reshape(&with(tail))
    };
    let b = shift(lq.w_b, &s_b, &[1, n])?
        .add_row(&g.param(params, hc.b))?
        .reshape(&with(&[n, 1]))?;
    let a_m = shift(lq.w_m, &s_a, &[1, n])?.add_row(&g.param(params, hc.a_m))?;
    let a_r = shift(lq.w_r, &s_a, &[n * n])?
        .add_row(&g.param(params, hc.a_r))?
        .reshape(&with(&[n, n]))?;
    Ok(HcCoeffs {
        b,
        a_m,
        a_r_t: a_r.transpose()?,
    })
}

/// Static or liquid coefficients, whichever `hc` carries.
pub fn hc_coefficients<'g>(g: &'g Graph, params: &Params, hc: &HcParams, h: &Var<'g>) -> Result<HcCoeffs<'g>> {
    check_state(hc, h)?;
    match hc.liquid {
        Some(_) => hc_liquid_params(g, params, hc, h),
        None => hc_static_coeffs(g, params, hc),
    }
}

/// `x₀ = A_mᵀ H`, shape `[.., d]`.
pub fn hc_aggregate<'g>(coeffs: &HcCoeffs<'g>, h: &Var<'g>) -> Result<Var<'g>> {
    let x = coeffs.a_m.matmul(h)?;
    let s = h.shape();
    let mut out = s[..s.len() - 2].to_vec();
    out.push(s[s.len() - 1]);
    x.reshape(&out)
}

/// `Ĥ = Bᵀ·layer_out + A_rᵀ H`.
pub fn hc_combine<'g>(coeffs: &HcCoeffs<'g>, h: &Var<'g>, layer_out: &Var<'g>) -> Result<Var<'g>> {
    let mut row = layer_out.shape().to_vec();
    let d = row.pop().unwrap_or(0);
    row.extend([1, d]);
    let broadcast = coeffs.b.matmul(&layer_out.reshape(&row)?)?;
    broadcast.add(&coeffs.a_r_t.matmul(h)?)
}

/// Sums the streams and applies the final layer norm.
pub fn hc_network_finalize<'g>(g: &'g Graph, params: &Params, h: &Var<'g>, norm: &LayerNorm) -> Result<Var<'g>> {
    let axis = h.shape().len().checked_sub(2).ok_or_else(|| invalid("state needs a stream axis"))?;
    norm.forward(g, params, &h.sum_axis(axis)?)
}

/// The `(n+1)×(n+1)` connection matrix `[[0, B], [A_m, A_r]]`.
pub fn hc_matrix(b: &[f64], a_m: &[f64], a_r: &Tensor) -> Result<Tensor> {
    let n = b.len();
    if a_m.len() != n || a_r.shape() != [n, n] {
        return Err(invalid("connection blocks have inconsistent sizes"));
    }
    let mut m = Tensor::zeros(&[n + 1, n + 1]);
    let data = m.data_mut();
    for j in 0..n {
        data[j + 1] = b[j];
    }
    for i in 0..n {
        data[(i + 1) * (n + 1)] = a_m[i];
        for j in 0..n {
            data[(i + 1) * (n + 1) + j + 1] = a_r.data()[i * n + j];
        }
    }
    Ok(m)
}

/// Width connection `WC = (A_m  A_r)`, shape `[n, n+1]`.
pub fn width_connection(a_m: &[f64], a_r: &Tensor) -> Result<Tensor> {
    let n = a_m.len();
    if a_r.shape() != [n, n] {
        return Err(invalid("A_r must be n×n"));
    }
    Ok(Tensor::from_fn(&[n, n + 1], |i| {
        let (r, c) = (i / (n + 1), i % (n + 1));
        if c == 0 {
            a_m[r]
        } else {
            a_r.data()[r * n + c - 1]
        }
    }))
}

/// Depth connection `DC = [B; I]`, shape `[n+1, n]`.
pub fn depth_connection(b: &[f64]) -> Tensor {
    let n = b.len();
    Tensor::from_fn(&[n + 1, n], |i| {
        let (r, c) = (i / n, i % n);
        match r {
            0 => b[c],
            _ if r - 1 == c => 1.0,
            _ => 0.0,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        uniform(r, shape, 1.0)
    }

    fn set(p: &mut Params, id: ParamId, shape: &[usize], v: &[f64]) {
        p.set(id, Tensor::new(shape, v.to_vec()).unwrap()).unwrap();
    }

    #[test]
    fn aggregate_examples() {
        let mut p = Params::new();
        let hc = HcParams::new(&mut p, "hc", 2, 2, false, &mut rng(0)).unwrap();
        let g = Graph::new();
        let same = g.constant(Tensor::new(&[1, 2, 2], vec![0.3, -1.0, 0.3, -1.0]).unwrap());
        let c = hc_coefficients(&g, &p, &hc, &same).unwrap();
        assert_eq!(hc_aggregate(&c, &same).unwrap().value().data(), &[0.3, -1.0]);

        set(&mut p, hc.a_m, &[2], &[2.0, -1.0]);
        let g = Graph::new();
        let h = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = hc_coefficients(&g, &p, &hc, &h).unwrap();
        assert_eq!(hc_aggregate(&c, &h).unwrap().value().data(), &[2.0 - 3.0, 4.0 - 4.0]);
    }

    #[test]
    fn combine_hand_computation() {
        let mut p = Params::new();
        let hc = HcParams::new(&mut p, "hc", 2, 2, false, &mut rng(0)).unwrap();
        set(&mut p, hc.b, &[2], &[1.0, 0.5]);
        set(&mut p, hc.a_r, &[2, 2], &[1.0, 2.0, 0.0, 3.0]);
        let g = Graph::new();
        let h = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let l = g.constant(Tensor::new(&[2], vec![10.0, 20.0]).unwrap());
        let c = hc_coefficients(&g, &p, &hc, &h).unwrap();
        let out = hc_combine(&c, &h, &l).unwrap();
        // Ĥ_j = B_j L + Σ_i A_r[i, j] H_i
        let want = [10.0 + 1.0, 20.0 + 2.0, 5.0 + 2.0 + 9.0, 10.0 + 4.0 + 12.0];
        assert_eq!(out.value().data(), &want);

        set(&mut p, hc.b, &[2], &[0.0, 0.0]);
        let g = Graph::new();
        let h = g.constant(h.value().clone());
        let l = g.constant(l.value().clone());
        let c = hc_coefficients(&g, &p, &hc, &h).unwrap();
        let mixed = c.a_r_t.matmul(&h).unwrap();
        assert_eq!(hc_combine(&c, &h, &l).unwrap().value(), mixed.value());
    }

    #[test]
    fn single_stream_is_post_norm_residual() {
        let mut r = rng(1);
        let mut p = Params::new();
        let hc = HcParams::new(&mut p, "hc", 1, 3, false, &mut r).unwrap();
        let sub = Linear::new(&mut p, "L", 3, 3, &mut r);
        let ln = LayerNorm::new(&mut p, "ln", 3);
        let x = random(&mut r, &[2, 4, 3]);
        let g = Graph::new();
        let xv = g.constant(x);
        let h = hc_expand(&xv, 1).unwrap();
        let c = hc_coefficients(&g, &p, &hc, &h).unwrap();
        let x0 = hc_aggregate(&c, &h).unwrap();
        let block = ln
            .forward(&g, &p, &hc_combine(&c, &h, &sub.forward(&g, &p, &x0).unwrap()).unwrap())
            .unwrap();
        let plain = ln.forward(&g, &p, &xv.add(&sub.forward(&g, &p, &xv).unwrap()).unwrap()).unwrap();
        assert_eq!(block.value().data(), plain.value().data());
    }

    #[test]
    fn liquid_inert_when_scales_or_weights_vanish() {
        for zero_weights in [false, true] {
            let mut r = rng(2);
            let mut p = Params::new();
            let hc = HcParams::new(&mut p, "hc", 3, 4, true, &mut r).unwrap();
            let lq = hc.liquid.unwrap();
            if zero_weights {
                for id in [lq.w_b, lq.w_m, lq.w_r] {
                    let s = p.get(id).shape().to_vec();
                    p.set(id, Tensor::zeros(&s)).unwrap();
                }
            } else {
                set(&mut p, lq.s_b, &[1], &[0.0]);
                set(&mut p, lq.s_a, &[1], &[0.0]);
            }
            let h = random(&mut r, &[2, 5, 3, 4]);
            let l = random(&mut r, &[2, 5, 4]);
            let g = Graph::new();
            let (hv, lv) = (g.constant(h), g.constant(l));
            let liquid = hc_liquid_params(&g, &p, &hc, &hv).unwrap();
            let fixed = hc_static_coeffs(&g, &p, &hc).unwrap();
            assert_eq!(
                hc_aggregate(&liquid, &hv).unwrap().value(),
                hc_aggregate(&fixed, &hv).unwrap().value()
            );
            assert_eq!(
                hc_combine(&liquid, &hv, &lv).unwrap().value(),
                hc_combine(&fixed, &hv, &lv).unwrap().value()
            );
        }
    }

    #[test]
    fn liquid_matches_scripted_oracle() {
        let mut r = rng(3);
        let mut p = Params::new();
        let hc = HcParams::new(&mut p, "hc", 2, 2, true, &mut r).unwrap();
        let lq = hc.liquid.unwrap();
        set(&mut p, lq.s_b, &[1], &[0.3]);
        set(&mut p, lq.s_a, &[1], &[-0.2]);
        set(&mut p, hc.a_r, &[2, 2], &[0.9, 0.1, -0.2, 1.1]);
        let h = random(&mut r, &[2, 2]);
        let g = Graph::new();
        let c = hc_liquid_params(&g, &p, &hc, &g.constant(h.clone())).unwrap();
        let norm = |row: &[f64]| {
            let m = (row[0] + row[1]) / 2.0;
            let v = ((row[0] - m).powi(2) + (row[1] - m).powi(2)) / 2.0;
            [
                (row[0] - m) / (v + LAYER_NORM_EPS).sqrt(),
                (row[1] - m) / (v + LAYER_NORM_EPS).sqrt(),
            ]
        };
        let w = |id: ParamId| p.get(id).data().to_vec();
        let (wb, wm, wr, ar) = (w(lq.w_b), w(lq.w_m), w(lq.w_r), w(hc.a_r));
        for i in 0..2 {
            let x = norm(&h.data()[i * 2..i * 2 + 2]);
            let bi = 1.0 + 0.3 * (x[0] * wb[0] + x[1] * wb[1]).tanh();
            let mi = 0.5 - 0.2 * (x[0] * wm[0] + x[1] * wm[1]).tanh();
            assert!((c.b.value().data()[i] - bi).abs() < 1e-14);
            assert!((c.a_m.value().data()[i] - mi).abs() < 1e-14);
            for j in 0..2 {
                let rij = ar[i * 2 + j] - 0.2 * (x[0] * wr[j] + x[1] * wr[2 + j]).tanh();
                // a_r_t holds the transpose
                assert!((c.a_r_t.value().data()[j * 2 + i] - rij).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn liquid_requires_liquid_params() {
        let mut p = Params::new();
        let hc = HcParams::new(&mut p, "hc", 2, 2, false, &mut rng(0)).unwrap();
        let g = Graph::new();
        assert!(hc_liquid_params(&g, &p, &hc, &g.constant(Tensor::zeros(&[2, 2]))).is_err());
    }

    #[test]
    fn finalize_examples() {
        let mut r = rng(4);
        let mut p = Params::new();
        let ln = LayerNorm::new(&mut p, "ln", 3);
        let s = random(&mut r, &[2, 1, 3]).map(|x| 10.0 * x);
        let g = Graph::new();
        let one = hc_network_finalize(&g, &p, &g.constant(s.clone()), &ln).unwrap();
        let plain = g.constant(s.reshape(&[2, 3]).unwrap()).layer_norm(LAYER_NORM_EPS).unwrap();
        assert!(one.value().max_abs_diff(plain.value()) < 1e-15);

        let twin = g.constant(Tensor::from_fn(&[2, 2, 3], |i| s.data()[(i / 6) * 3 + i % 3]));
        let doubled = hc_network_finalize(&g, &p, &twin, &ln).unwrap();
        assert!(doubled.value().max_abs_diff(plain.value()) < 1e-6);

        let h = random(&mut r, &[1, 3, 3]);
        let got = hc_network_finalize(&g, &p, &g.constant(h.clone()), &ln).unwrap();
        let sum: Vec<f64> = (0..3).map(|c| (0..3).map(|i| h.data()[i * 3 + c]).sum()).collect();
        let m = sum.iter().sum::<f64>() / 3.0;
        let v = sum.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0;
        for c in 0..3 {
            assert!((got.value().data()[c] - (sum[c] - m) / (v + LAYER_NORM_EPS).sqrt()).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn width_depth_split_matches_monolithic_matrix(seed in any::<u64>(), n in 1usize..5, d in 1usize..4) {
            let mut r = rng(seed);
            let b: Vec<f64> = random(&mut r, &[n]).into_data();
            let a_m: Vec<f64> = random(&mut r, &[n]).into_data();
            let a_r = random(&mut r, &[n, n]);
            let h = random(&mut r, &[n, d]);
            let w = random(&mut r, &[d, d]);
            let layer = |x: &Tensor| x.matmul(&w).unwrap().map(f64::tanh);

            // monolithic: pass 1 on [0; H] gives x₀, pass 2 on [L(x₀); H] gives Ĥ
            let m_t = {
                let m = hc_matrix(&b, &a_m, &a_r).unwrap();
                Tensor::from_fn(&[n + 1, n + 1], |i| m.data()[(i % (n + 1)) * (n + 1) + i / (n + 1)])
            };
            let stack = |top: &Tensor| Tensor::from_fn(&[n + 1, d], |i| if i < d { top.data()[i] } else { h.data()[i - d] });
            let pass1 = m_t.matmul(&stack(&Tensor::zeros(&[1, d]))).unwrap();
            let x0 = Tensor::new(&[1, d], pass1.data()[..d].to_vec()).unwrap();
            let pass2 = m_t.matmul(&stack(&layer(&x0))).unwrap();

            // split: WCᵀ H = [x₀; A_rᵀ H], then DCᵀ [L(x₀); A_rᵀ H]
            let wc = width_connection(&a_m, &a_r).unwrap();
            let wc_t = Tensor::from_fn(&[n + 1, n], |i| wc.data()[(i % n) * (n + 1) + i / n]);
            let mixed = wc_t.matmul(&h).unwrap();
            let x0s = Tensor::new(&[1, d], mixed.data()[..d].to_vec()).unwrap();
            let dc = depth_connection(&b);
            let dc_t = Tensor::from_fn(&[n, n + 1], |i| dc.data()[(i % (n + 1)) * n + i / (n + 1)]);
            let ls = layer(&x0s);
            let stacked = Tensor::from_fn(&[n + 1, d], |i| if i < d { ls.data()[i] } else { mixed.data()[i] });
            let split = dc_t.matmul(&stacked).unwrap();

            prop_assert!(x0.max_abs_diff(&x0s) < 1e-12);
            let tail = Tensor::new(&[n, d], pass2.data()[d..].to_vec()).unwrap();
            prop_assert!(tail.max_abs_diff(&split) < 1e-12);

            // and the taped static path agrees with both
            let mut p = Params::new();
            let hc = HcParams::new(&mut p, "hc", n, d, false, &mut r).unwrap();
            set(&mut p, hc.b, &[n], &b);
            set(&mut p, hc.a_m, &[n], &a_m);
            p.set(hc.a_r, a_r.clone()).unwrap();
            let g = Graph::new();
            let hv = g.constant(h.clone());
            let c = hc_coefficients(&g, &p, &hc, &hv).unwrap();
            let x0v = hc_aggregate(&c, &hv).unwrap();
            let lv = g.constant(layer(&x0v.value().reshape(&[1, d]).unwrap()).reshape(&[d]).unwrap());
            let out = hc_combine(&c, &hv, &lv).unwrap();
            prop_assert!(out.value().max_abs_diff(&split) < 1e-12);
        }
    }
}
