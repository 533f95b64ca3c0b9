//! Desk-scale experiments: spiral reconstruction against the frozen-gate
//! limit, and attention mass on an uninformative first token.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::{generate_spirals, spiral_samples, SpiralSpec};
use crate::error::Result;
use crate::lan::{GateMode, LanConfig};
use crate::model::{AttentionTrace, FluidConfig, FluidModel, ModelInput};
use crate::sparse::TopK;
use crate::tensor::Tensor;
use crate::train::{evaluate, train, LossKind, OptimizerConfig, Sample, TrainConfig, TrainReport};

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiralExperiment {
    pub data: SpiralSpec,
    /// Leading share of spirals used for training; the rest are held out.
    pub train_fraction: f64,
    pub model: FluidConfig,
    pub train: TrainConfig,
}

impl SpiralExperiment {
    /// 30 spirals, `d_model = 32`, 4 heads, 5 Euler steps, Top-K 8, sinusoidal
    /// time codes, 100 epochs.
    pub fn desk_scale() -> Self {
        let mut lan = LanConfig::new(32, 4, 5, TopK::K(8));
        lan.causal = false;
        let mut model = FluidConfig::new(2, 2, lan);
        model.time_encoding = Some(SPIRAL_TIME_SCALE);
        Self {
            data: SpiralSpec::new(30, 150, 50, 0),
            train_fraction: 0.8,
            model,
            train: TrainConfig::new(OptimizerConfig::adamw(3e-3), 100, 2, LossKind::Mae, 0),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SpiralOutcome {
    pub seed: u64,
    pub frozen: bool,
    pub test_mae: f64,
    pub final_train_loss: f64,
}

/// Fits a fresh model on `train_set` and returns its MAE on `test_set`.
/// `frozen` swaps every gate for the softmax-attention limit; `val` feeds
/// checkpoint selection.
pub fn fit_and_score(
    exp: &SpiralExperiment,
    seed: u64,
    frozen: bool,
    train_set: &[Sample],
    val: &[Sample],
    test_set: &[Sample],
    checkpoint: Option<&Path>,
) -> Result<(f64, TrainReport, FluidModel)> {
    let mut cfg = exp.model.clone();
    cfg.seed = seed;
    if frozen {
        cfg.lan.gate_mode = GateMode::FrozenSdpa { f_tau: 1.0 };
    }
    let mut model = FluidModel::new(cfg)?;
    let mut tc = exp.train.clone();
    tc.seed = seed;
    let report = train(&mut model, train_set, val, &tc, checkpoint)?;
    let mae = evaluate(&model, test_set, LossKind::Mae, tc.batch_size)?;
    Ok((mae, report, model))
}

/// Leading share of `samples` for training, the rest for testing.
pub fn holdout_split(samples: &[Sample], train_fraction: f64) -> Result<(&[Sample], &[Sample])> {
    if samples.len() < 2 {
        return Err(crate::error::invalid("need at least two samples for a held-out split"));
    }
    let n = ((samples.len() as f64 * train_fraction).round() as usize).clamp(1, samples.len() - 1);
    Ok(samples.split_at(n))
}

/// Generates spirals with `seed`, trains on the leading ones and reports MAE
/// on the held-out rest.
pub fn run_spiral(exp: &SpiralExperiment, seed: u64, frozen: bool) -> Result<(SpiralOutcome, TrainReport)> {
    let mut spec = exp.data.clone();
    spec.seed = seed;
    let samples = spiral_samples(&spec, &generate_spirals(&spec)?)?;
    let (train_set, test_set) = holdout_split(&samples, exp.train_fraction)?;
    let (test_mae, report, _) = fit_and_score(exp, seed, frozen, train_set, &[], test_set, None)?;
    let outcome = SpiralOutcome {
        seed,
        frozen,
        test_mae,
        final_train_loss: report.history.last().map_or(f64::NAN, |r| r.train_loss),
    };
    Ok((outcome, report))
}

#[derive(Debug, Clone, Serialize)]
pub struct SpiralComparison {
    pub runs: Vec<SpiralOutcome>,
    pub median_fluid: f64,
    pub median_frozen: f64,
    pub mae_ceiling: f64,
    pub pass: bool,
}

pub const SPIRAL_MAE_CEILING: f64 = 0.05;
/// Sinusoid scale for spiral timestamps normalised to `[0, 1]`.
pub const SPIRAL_TIME_SCALE: f64 = 50.0;

/// Learned gates against frozen gates over `seeds`, compared by median MAE.
pub fn spiral_comparison(exp: &SpiralExperiment, seeds: &[u64]) -> Result<SpiralComparison> {
    let mut runs = Vec::new();
    for &seed in seeds {
        for frozen in [false, true] {
            runs.push(run_spiral(exp, seed, frozen)?.0);
        }
    }
    let pick = |f: bool| runs.iter().filter(|r| r.frozen == f).map(|r| r.test_mae).collect::<Vec<_>>();
    let (median_fluid, median_frozen) = (median(&pick(false)), median(&pick(true)));
    Ok(SpiralComparison {
        median_fluid,
        median_frozen,
        mae_ceiling: SPIRAL_MAE_CEILING,
        pass: median_fluid <= SPIRAL_MAE_CEILING && median_fluid < median_frozen,
        runs,
    })
}

/// Sequences whose first event is a fixed marker carrying no information;
/// targets are running means of the later values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinkTask {
    pub n_sequences: usize,
    pub len: usize,
    pub model: FluidConfig,
    pub train: TrainConfig,
}

impl SinkTask {
    pub fn desk_scale() -> Self {
        let mut lan = LanConfig::new(16, 2, 3, TopK::Full);
        lan.causal = true;
        let model = FluidConfig::new(1, 1, lan);
        Self {
            n_sequences: 48,
            len: 12,
            model,
            train: TrainConfig::new(OptimizerConfig::adamw(3e-3), 15, 8, LossKind::Mse, 0),
        }
    }
}

pub fn sink_samples(task: &SinkTask, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = task.len;
    (0..task.n_sequences)
        .map(|_| {
            let mut x = vec![1.0];
            x.extend((1..t).map(|_| rng.gen_range(-1.0..1.0)));
            let mut target = vec![0.0; t];
            let mut sum = 0.0;
            for n in 1..t {
                sum += x[n];
                target[n] = sum / n as f64;
            }
            let times = Tensor::from_fn(&[1, t], |i| i as f64 / t as f64);
            let mut mask = vec![true; t];
            mask[0] = false;
            Ok(Sample {
                history: ModelInput::new(Tensor::new(&[1, t, 1], x)?, times.clone(), vec![true; t])?,
                queries: ModelInput::queries(times, 1, vec![true; t])?,
                target: Tensor::new(&[1, t, 1], target)?,
                target_mask: mask,
            })
        })
        .collect()
}

/// Mean attention weight on key 0 across encoder self-attention layers.
pub fn first_token_mass(model: &FluidModel, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let g = Graph::no_grad();
        let mut trace: Vec<AttentionTrace> = Vec::new();
        model.net.forward(&g, &model.params, &s.history, &s.queries, Some(&mut trace))?;
        for layer in trace.iter().filter(|l| l.layer.starts_with("enc")) {
            total += layer.mean_key_mass()[0];
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct SinkComparison {
    pub with_gate: Vec<f64>,
    pub without_gate: Vec<f64>,
    pub median_with: f64,
    pub median_without: f64,
    pub pass: bool,
}

/// Trains with and without the output gate for each seed and measures the
/// first-token mass on held-out sequences.
pub fn sink_comparison(task: &SinkTask, seeds: &[u64]) -> Result<SinkComparison> {
    let (mut with_gate, mut without_gate) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let train_set = sink_samples(task, seed)?;
        let test_set = sink_samples(task, seed.wrapping_add(1 << 32))?;
        for gate in [true, false] {
            let mut cfg = task.model.clone();
            cfg.seed = seed;
            cfg.lan.sink_gate = gate;
            let mut model = FluidModel::new(cfg)?;
            let mut tc = task.train.clone();
            tc.seed = seed;
            train(&mut model, &train_set, &[], &tc, None)?;
            let mass = first_token_mass(&model, &test_set)?;
            if gate {
                with_gate.push(mass);
            } else {
                without_gate.push(mass);
            }
        }
    }
    let (median_with, median_without) = (median(&with_gate), median(&without_gate));
    Ok(SinkComparison {
        pass: median_with <= median_without,
        with_gate,
        without_gate,
        median_with,
        median_without,
    })
}
