//! One PASS/FAIL line per acceptance criterion. Criteria listed in
//! `UNMET_AT_DESK_SCALE` are reported but do not fail the run unless
//! `FLUID_ACCEPTANCE_STRICT=1` is set.

use std::rc::Rc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fluid_core::autograd::concat;
use fluid_core::bench::{bench_config, pair_tensor_bytes, BenchConfig, BenchReport};
use fluid_core::experiments::{sink_comparison, spiral_comparison, SinkTask, SpiralExperiment};
use fluid_core::hyper::{hc_aggregate, hc_coefficients, hc_combine, hc_expand, hc_liquid_params, hc_static_coeffs, HcMode, HcParams};
use fluid_core::lan::{euler_step_var, LanConfig};
use fluid_core::model::{FluidConfig, FluidModel, ModelInput};
use fluid_core::nn::{LayerNorm, Linear};
use fluid_core::sparse::{assemble_pairs, select_pairs, TopK};
use fluid_core::tensor::arena;
use fluid_core::train::gradcheck::{check_gradients, check_param_gradients, GradCheckReport};
use fluid_core::verify::{convergence_suite, invariance_suite, limits_suite, stability_suite};
use fluid_core::{Graph, Params, Result, Tensor, Var};

const INVARIANCE_TRAJECTORIES: usize = 10_000;
const INVARIANCE_BUDGET: Duration = Duration::from_secs(10);
const STABILITY_BUDGET: Duration = Duration::from_secs(1);
const LIMIT_BUDGET: Duration = Duration::from_secs(5);
const FD_STEP: f64 = 1e-5;
const OP_REL_TOLERANCE: f64 = 1e-4;
const MODEL_REL_TOLERANCE: f64 = 1e-3;
const PAIR_MEMORY_RATIO: f64 = 0.05;
const SPIRAL_SEEDS: [u64; 3] = [0, 1, 2];
const SPIRAL_BUDGET: Duration = Duration::from_secs(15 * 60);
const SINK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const THROUGHPUT_CONSISTENCY: f64 = 0.05;
const UNMET_AT_DESK_SCALE: &[usize] = &[];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn criterion_1() -> Result<Verdict> {
    let r = invariance_suite(INVARIANCE_TRAJECTORIES, 0)?;
    let ok = r.pass && r.trajectories == INVARIANCE_TRAJECTORIES && r.elapsed_s < INVARIANCE_BUDGET.as_secs_f64();
    verdict(
        ok,
        format!(
            "{} trajectories, max excursion {:.1e}, {:.2}s",
            r.trajectories, r.max_excursion, r.elapsed_s
        ),
    )
}

fn criterion_2() -> Result<Verdict> {
    let start = Instant::now();
    let r = stability_suite(10_000, 0)?;
    let t = start.elapsed();
    verdict(
        r.pass && t < STABILITY_BUDGET,
        format!(
            "alpha in [{:.3e}, {:.6}], unclamped growth {:.3e}, {:.3}s",
            r.alpha_min,
            r.alpha_max,
            r.unclamped_growth,
            t.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Result<Verdict> {
    let start = Instant::now();
    let r = limits_suite(0)?;
    let t = start.elapsed();
    let ok = r.sdpa.pass && r.sdpa.battery_size == 100 && t < LIMIT_BUDGET;
    verdict(
        ok,
        format!(
            "max gap {:.2e} over {} instances (tol {:.0e}), {:.2}s",
            r.sdpa.max_gap,
            r.sdpa.battery_size,
            r.sdpa.tolerance,
            t.as_secs_f64()
        ),
    )
}

fn criterion_4() -> Result<Verdict> {
    let start = Instant::now();
    let r = limits_suite(0)?;
    let c = convergence_suite()?;
    let t = start.elapsed();
    let ok = r.ctrnn.pass && r.ctrnn.max_gap == 0.0 && c.pass && t < LIMIT_BUDGET;
    verdict(
        ok,
        format!(
            "leaky-integrator gap {:.1e}, halving ratio {:.3}, analytic rel gap {:.2e}, {:.2}s",
            r.ctrnn.max_gap,
            c.ratio,
            c.analytic_rel_gap,
            t.as_secs_f64()
        ),
    )
}

fn criterion_5() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = 6;
    let mut p = Params::new();
    let hc = HcParams::new(&mut p, "hc", 1, d, false, &mut rng)?;
    p.set(hc.b, Tensor::ones(&[1]))?;
    p.set(hc.a_m, Tensor::ones(&[1]))?;
    p.set(hc.a_r, Tensor::ones(&[1, 1]))?;
    let sub = Linear::new(&mut p, "L", d, d, &mut rng);
    let ln = LayerNorm::new(&mut p, "ln", d);
    let x = rand_t(&mut rng, &[3, 7, d]);
    let g = Graph::new();
    let xv = g.constant(x);
    let h = hc_expand(&xv, 1)?;
    let c = hc_coefficients(&g, &p, &hc, &h)?;
    let x0 = hc_aggregate(&c, &h)?;
    let block = ln.forward(&g, &p, &hc_combine(&c, &h, &sub.forward(&g, &p, &x0)?)?)?;
    let plain = ln.forward(&g, &p, &xv.add(&sub.forward(&g, &p, &xv)?)?)?;
    let residual_ok = block.value().data() == plain.value().data();

    let mut p = Params::new();
    let n = 3;
    let hc = HcParams::new(&mut p, "hc", n, d, true, &mut rng)?;
    let lq = hc.liquid.expect("liquid terms");
    p.set(lq.s_b, Tensor::zeros(&[1]))?;
    p.set(lq.s_a, Tensor::zeros(&[1]))?;
    let h = rand_t(&mut rng, &[2, 5, n, d]);
    let l = rand_t(&mut rng, &[2, 5, d]);
    let g = Graph::new();
    let (hv, lv) = (g.constant(h), g.constant(l));
    let liquid = hc_liquid_params(&g, &p, &hc, &hv)?;
    let fixed = hc_static_coeffs(&g, &p, &hc)?;
    let liquid_ok = hc_aggregate(&liquid, &hv)?.value() == hc_aggregate(&fixed, &hv)?.value()
        && hc_combine(&liquid, &hv, &lv)?.value() == hc_combine(&fixed, &hv, &lv)?.value();
    verdict(
        residual_ok && liquid_ok,
        format!("n=1 block bitwise: {residual_ok}, liquid s=0 bitwise: {liquid_ok}"),
    )
}

type OpFn = for<'g> fn(&[Var<'g>]) -> Result<Var<'g>>;

fn op_battery() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |v| Ok(v[0].matmul(&v[1])?.square().sum())),
        ("batched_matmul", vec![vec![2, 3, 4], vec![2, 4, 2]], |v| {
            Ok(v[0].matmul(&v[1])?.square().sum())
        }),
        ("add", vec![vec![3, 4], vec![3, 4]], |v| Ok(v[0].add(&v[1])?.square().sum())),
        ("sub", vec![vec![3, 4], vec![3, 4]], |v| Ok(v[0].sub(&v[1])?.square().sum())),
        ("mul", vec![vec![3, 4], vec![3, 4]], |v| Ok(v[0].mul(&v[1])?.square().sum())),
        ("add_row", vec![vec![3, 4], vec![4]], |v| Ok(v[0].add_row(&v[1])?.square().sum())),
        ("mul_row", vec![vec![3, 4], vec![4]], |v| Ok(v[0].mul_row(&v[1])?.square().sum())),
        ("scale", vec![vec![5]], |v| Ok(v[0].scale(-1.7).add_scalar(0.3).square().sum())),
        ("neg", vec![vec![5]], |v| Ok(v[0].neg().exp().sum())),
        ("tanh", vec![vec![6]], |v| Ok(v[0].tanh().square().sum())),
        ("sigmoid", vec![vec![6]], |v| Ok(v[0].sigmoid().square().sum())),
        ("softplus", vec![vec![6]], |v| Ok(v[0].softplus().square().sum())),
        ("exp", vec![vec![6]], |v| Ok(v[0].exp().sum())),
        ("mean", vec![vec![2, 3]], |v| Ok(v[0].square().mean())),
        ("sum_axis", vec![vec![2, 3, 4]], |v| Ok(v[0].sum_axis(1)?.square().sum())),
        ("reshape_permute", vec![vec![2, 3, 4]], |v| {
            Ok(v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])?.tanh().square().sum())
        }),
        ("transpose", vec![vec![3, 4], vec![3, 4]], |v| {
            Ok(v[0].transpose()?.matmul(&v[1])?.square().sum())
        }),
        ("narrow", vec![vec![3, 5]], |v| Ok(v[0].narrow(1, 1, 3)?.square().sum())),
        ("gather_rows", vec![vec![4, 3]], |v| {
            Ok(v[0].gather_rows(Rc::from(vec![2, 0, 2, 3]))?.tanh().square().sum())
        }),
        ("concat", vec![vec![2, 3], vec![2, 2]], |v| {
            Ok(concat(&[v[0].clone(), v[1].clone()], 1)?.tanh().square().sum())
        }),
        ("softmax", vec![vec![3, 4], vec![3, 4]], |v| {
            Ok(v[0].softmax(None)?.mul(&v[1])?.sum())
        }),
        ("masked_softmax", vec![vec![2, 3], vec![2, 3]], |v| {
            let mask: Rc<[bool]> = Rc::from(vec![true, false, true, true, true, false]);
            Ok(v[0].softmax(Some(mask))?.mul(&v[1])?.sum())
        }),
        ("log_softmax", vec![vec![3, 4], vec![3, 4]], |v| {
            Ok(v[0].log_softmax()?.mul(&v[1])?.sum())
        }),
        ("layer_norm", vec![vec![3, 5], vec![3, 5]], |v| {
            Ok(v[0].layer_norm(1e-5)?.mul(&v[1])?.sum())
        }),
        ("euler_step", vec![vec![6], vec![6], vec![6]], |v| {
            let f_tau = v[1].softplus().add_scalar(1e-3);
            Ok(euler_step_var(&v[0], &f_tau, &v[2].tanh(), 0.3)?.square().sum())
        }),
        ("pair_assembly", vec![vec![1, 4, 3], vec![1, 4, 3]], |v| {
            let sel = select_pairs(v[0].value(), v[1].value(), TopK::K(2), true, None)?;
            Ok(assemble_pairs(&v[0], &v[1], &sel)?.tanh().square().sum())
        }),
    ]
}

fn micro_model(hc: HcMode, gate_steps: usize) -> Result<(FluidModel, ModelInput, ModelInput)> {
    let mut lan = LanConfig::new(8, 2, gate_steps, TopK::K(3));
    lan.sink_gate = true;
    let mut cfg = FluidConfig::new(2, 2, lan);
    cfg.hc = hc;
    cfg.ffn_dim = 8;
    cfg.max_len = 8;
    cfg.seed = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let hist = ModelInput::new(
        rand_t(&mut rng, &[1, 4, 2]),
        Tensor::from_fn(&[1, 4], |i| 0.1 + 0.2 * i as f64),
        vec![true; 4],
    )?;
    let qry = ModelInput::queries(Tensor::new(&[1, 2], vec![0.9, 1.1])?, 2, vec![true; 2])?;
    Ok((FluidModel::new(cfg)?, hist, qry))
}

fn model_gradcheck(hc: HcMode) -> Result<GradCheckReport> {
    let (mut m, hist, qry) = micro_model(hc, 2)?;
    let net = m.net.clone();
    let ids: Vec<_> = m.params.ids().collect();
    let entries: Vec<_> = ids
        .iter()
        .map(|&id| {
            let n = m.params.get(id).numel();
            (id, (0..n).step_by((n / 4).max(1)).collect::<Vec<_>>())
        })
        .collect();
    check_param_gradients(&mut m.params, &entries, FD_STEP, |g, p| {
        Ok(net.forward(g, p, &hist, &qry, None)?.square().sum())
    })
}

fn criterion_6() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_op = ("", 0.0f64);
    for (name, shapes, f) in op_battery() {
        let inputs: Vec<Tensor> = shapes.iter().map(|s| rand_t(&mut rng, s)).collect();
        let r = check_gradients(&inputs, FD_STEP, f)?;
        if r.max_rel_error >= worst_op.1 {
            worst_op = (name, r.max_rel_error);
        }
    }
    let mut worst_model = (String::new(), 0.0f64);
    for hc in [HcMode::Residual, HcMode::Static { n: 2 }, HcMode::Liquid { n: 2 }] {
        let r = model_gradcheck(hc)?;
        if r.max_rel_error >= worst_model.1 {
            worst_model = (format!("{hc:?}"), r.max_rel_error);
        }
    }
    verdict(
        worst_op.1 < OP_REL_TOLERANCE && worst_model.1 < MODEL_REL_TOLERANCE,
        format!(
            "{} ops, worst {} {:.2e} (tol {:.0e}); model worst {} {:.2e} (tol {:.0e})",
            op_battery().len(),
            worst_op.0,
            worst_op.1,
            OP_REL_TOLERANCE,
            worst_model.0,
            worst_model.1,
            MODEL_REL_TOLERANCE
        ),
    )
}

fn criterion_7() -> Result<Verdict> {
    let t = 9;
    let model_at = |top_k: TopK| -> Result<Vec<f64>> {
        let mut lan = LanConfig::new(8, 2, 3, top_k);
        lan.causal = false;
        let mut cfg = FluidConfig::new(2, 2, lan);
        cfg.n_layers = 2;
        cfg.max_len = 16;
        cfg.seed = 7;
        let m = FluidModel::new(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hist = ModelInput::new(
            rand_t(&mut rng, &[2, t, 2]),
            Tensor::from_fn(&[2, t], |i| (i % t) as f64 * 0.1),
            vec![true; 2 * t],
        )?;
        let qry = ModelInput::queries(Tensor::from_fn(&[2, 3], |i| 1.0 + (i % 3) as f64 * 0.1), 2, vec![true; 6])?;
        let g = Graph::no_grad();
        Ok(m.forward(&g, &hist, &qry)?.value().data().to_vec())
    };
    let full = model_at(TopK::Full)?;
    let exact = (t..t + 3)
        .map(|k| model_at(TopK::K(k)))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .all(|o| *o == full);

    let (len, head_dim) = (1024, 16);
    let predicted = pair_tensor_bytes(1, len, head_dim, TopK::K(8)) as f64 / pair_tensor_bytes(1, len, head_dim, TopK::Full) as f64;
    let measured = |top_k: TopK| -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let q = rand_t(&mut rng, &[1, len, head_dim]);
        let k = rand_t(&mut rng, &[1, len, head_dim]);
        let sel = select_pairs(&q, &k, top_k, false, None)?;
        let g = Graph::no_grad();
        let (qv, kv) = (g.constant(q), g.constant(k));
        arena::reset_peak();
        let base = arena::live_bytes();
        let u = assemble_pairs(&qv, &kv, &sel)?;
        let bytes = arena::peak_bytes() - base;
        drop(u);
        Ok(bytes)
    };
    let measured_ratio = measured(TopK::K(8))? as f64 / measured(TopK::Full)? as f64;
    verdict(
        exact && predicted < PAIR_MEMORY_RATIO && measured_ratio < PAIR_MEMORY_RATIO,
        format!(
            "K >= T bitwise: {exact}; pair memory ratio at T=1024 {predicted:.4} (measured {measured_ratio:.4}, limit {PAIR_MEMORY_RATIO})"
        ),
    )
}

fn criterion_8() -> Result<Verdict> {
    let start = Instant::now();
    let c = spiral_comparison(&SpiralExperiment::desk_scale(), &SPIRAL_SEEDS)?;
    let t = start.elapsed();
    let per_seed: Vec<String> = c
        .runs
        .iter()
        .map(|r| format!("s{}{}={:.4}", r.seed, if r.frozen { "/frozen" } else { "" }, r.test_mae))
        .collect();
    verdict(
        c.pass,
        format!(
            "median MAE {:.4} (ceiling {}) vs frozen {:.4}; {}; {:.0}s (target {}s)",
            c.median_fluid,
            c.mae_ceiling,
            c.median_frozen,
            per_seed.join(" "),
            t.as_secs_f64(),
            SPIRAL_BUDGET.as_secs()
        ),
    )
}

fn criterion_9() -> Result<Verdict> {
    let c = sink_comparison(&SinkTask::desk_scale(), &SINK_SEEDS)?;
    verdict(
        c.pass,
        format!(
            "median first-token mass {:.4} with gate vs {:.4} without",
            c.median_with, c.median_without
        ),
    )
}

fn criterion_10() -> Result<Verdict> {
    let sparse = bench_config(&BenchConfig::standard("topk8", TopK::K(8)))?;
    let mut full_cfg = BenchConfig::standard("full", TopK::Full);
    full_cfg.warmup = 0;
    let full = bench_config(&full_cfg)?;
    let columns = BenchReport::CSV_HEADER == "config,run_time_s,throughput_seq_s,peak_memory_mb";
    let consistent = [&sparse, &full]
        .iter()
        .all(|r| r.csv_row().split(',').count() == 4 && (r.throughput_seq_s * r.mean_time_s - 1.0).abs() < THROUGHPUT_CONSISTENCY);
    verdict(
        columns && consistent && sparse.peak_memory_mb < full.peak_memory_mb,
        format!("{} | {} | {}", BenchReport::CSV_HEADER, sparse.csv_row(), full.csv_row()),
    )
}

fn main() {
    let strict = std::env::var("FLUID_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [(&str, fn() -> Result<Verdict>); 10] = [
        ("forward invariance", criterion_1),
        ("euler stability", criterion_2),
        ("softmax-attention limit", criterion_3),
        ("leaky-integrator limit", criterion_4),
        ("residual reduction", criterion_5),
        ("gradient integrity", criterion_6),
        ("sparse equivalence", criterion_7),
        ("desk-scale spiral", criterion_8),
        ("sink-gate direction", criterion_9),
        ("bench report", criterion_10),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut fatal = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.contains(&id) {
            continue;
        }
        let v = run().unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e}"),
        });
        println!("criterion {id:>2} {name}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass && (strict || !UNMET_AT_DESK_SCALE.contains(&id)) {
            fatal.push(id);
        }
    }
    if !fatal.is_empty() {
        eprintln!("failed criteria: {fatal:?}");
        std::process::exit(1);
    }
}
