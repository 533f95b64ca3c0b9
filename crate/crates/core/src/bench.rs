//! Wall-clock and peak-memory measurement of encoder forward passes.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::lan::LanConfig;
use crate::model::{FluidConfig, FluidModel, ModelInput};
use crate::sparse::TopK;
use crate::tensor::{arena, Tensor};

fn default_reps() -> usize {
    3
}
fn default_warmup() -> usize {
    1
}
fn default_steps() -> usize {
    5
}
fn default_layers() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub name: String,
    pub d_model: usize,
    pub heads: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub top_k: TopK,
    #[serde(default = "default_steps")]
    pub euler_steps: usize,
    #[serde(default = "default_layers")]
    pub n_layers: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    #[serde(default)]
    pub seed: u64,
}

impl BenchConfig {
    /// `d_model = 64`, 4 heads, batch 1, 1024 events.
    pub fn standard(name: &str, top_k: TopK) -> Self {
        Self {
            name: name.to_string(),
            d_model: 64,
            heads: 4,
            batch: 1,
            seq_len: 1024,
            top_k,
            euler_steps: default_steps(),
            n_layers: default_layers(),
            reps: default_reps(),
            warmup: default_warmup(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 3 {
            return Err(Error::Config(format!("need at least 3 timed repetitions, got {}", self.reps)));
        }
        if self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be positive".into()));
        }
        Ok(())
    }

    pub fn model_config(&self) -> FluidConfig {
        let mut lan = LanConfig::new(self.d_model, self.heads, self.euler_steps, self.top_k);
        lan.causal = false;
        let mut cfg = FluidConfig::new(1, 1, lan);
        cfg.n_layers = self.n_layers;
        cfg.max_len = self.seq_len.max(1);
        cfg.seed = self.seed;
        cfg
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config: String,
    pub reps: usize,
    pub times_s: Vec<f64>,
    pub mean_time_s: f64,
    pub std_time_s: f64,
    /// Sequences per second: `reps·batch / Σ time`.
    pub throughput_seq_s: f64,
    pub peak_memory_mb: f64,
}

impl BenchReport {
    pub const CSV_HEADER: &'static str = "config,run_time_s,throughput_seq_s,peak_memory_mb";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.config, self.mean_time_s, self.throughput_seq_s, self.peak_memory_mb
        )
    }
}

/// Random irregular input of the configured size.
pub fn bench_input(cfg: &BenchConfig) -> Result<ModelInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (b, t) = (cfg.batch, cfg.seq_len);
    let values = Tensor::from_fn(&[b, t, 1], |_| rng.gen_range(-1.0..1.0));
    let times = Tensor::from_fn(&[b, t], |i| (i % t) as f64 / t as f64);
    ModelInput::new(values, times, vec![true; b * t])
}

/// Times `reps` tape-free encoder passes after `warmup` untimed ones. Peak
/// memory is the tensor-arena high-water mark over the timed passes.
pub fn bench(model: &FluidModel, cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let input = bench_input(cfg)?;
    let pass = || -> Result<()> {
        let g = Graph::no_grad();
        model.net.encode_predict(&g, &model.params, &input, None)?;
        Ok(())
    };
    for _ in 0..cfg.warmup {
        pass()?;
    }
    arena::reset_peak();
    let mut times_s = Vec::with_capacity(cfg.reps);
    for _ in 0..cfg.reps {
        let start = Instant::now();
        pass()?;
        times_s.push(start.elapsed().as_secs_f64());
    }
    let peak = arena::peak_bytes();
    let total: f64 = times_s.iter().sum();
    let mean = total / cfg.reps as f64;
    let var = times_s.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (cfg.reps - 1) as f64;
    Ok(BenchReport {
        config: cfg.name.clone(),
        reps: cfg.reps,
        mean_time_s: mean,
        std_time_s: var.sqrt(),
        throughput_seq_s: (cfg.reps * cfg.batch) as f64 / total,
        peak_memory_mb: peak as f64 / (1024.0 * 1024.0),
        times_s,
    })
}

/// Builds the model from `cfg` and benchmarks it.
pub fn bench_config(cfg: &BenchConfig) -> Result<BenchReport> {
    let model = FluidModel::new(cfg.model_config())?;
    bench(&model, cfg)
}

/// Bytes of the concatenated query-key pair tensor one head builds.
pub fn pair_tensor_bytes(batch: usize, seq_len: usize, head_dim: usize, top_k: TopK) -> usize {
    batch * seq_len * top_k.effective(seq_len) * 2 * head_dim * std::mem::size_of::<f64>()
}
