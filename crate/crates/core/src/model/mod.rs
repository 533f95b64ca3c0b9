//! Encoder–decoder built from liquid-attention blocks.
//!
//! Inputs are embedded by one affine map shared by both stacks (value
//! features plus a time channel), then offset by a sinusoidal position
//! table. Every sublayer is wrapped in a residual or hyper-connection and
//! followed by layer norm.

mod checkpoint;
mod positional;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Graph, Params, Var};
use crate::error::{Error, Result};
use crate::hyper::{hc_aggregate, hc_coefficients, hc_combine, hc_expand, hc_network_finalize, HcMode, HcParams};
use crate::lan::{LanConfig, LanLayer, LogitTrajectory};
use crate::nn::{FeedForward, LayerNorm, Linear};
use crate::sparse::PairSelection;
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry};
pub use positional::{positional_encoding, sinusoid, time_encoding};

/// What the output head predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    /// Logits over classes; the loss applies log-softmax.
    Classification,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidConfig {
    /// Value features per event, not counting the time channel.
    pub input_dim: usize,
    pub output_dim: usize,
    /// Attention settings shared by all blocks. `causal` applies to the
    /// encoder; decoder self-attention is always causal, cross-attention never.
    pub lan: LanConfig,
    pub n_layers: usize,
    pub ffn_dim: usize,
    pub hc: HcMode,
    pub max_len: usize,
    pub task: TaskKind,
    pub seed: u64,
    /// Encode positions as sinusoids of `time·scale` instead of the event
    /// index.
    #[serde(default)]
    pub time_encoding: Option<f64>,
}

impl FluidConfig {
    pub fn new(input_dim: usize, output_dim: usize, lan: LanConfig) -> Self {
        let ffn_dim = 2 * lan.d_model;
        Self {
            input_dim,
            output_dim,
            lan,
            n_layers: 1,
            ffn_dim,
            hc: HcMode::Residual,
            max_len: 512,
            task: TaskKind::Regression,
            seed: 0,
            time_encoding: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lan.validate()?;
        if self.lan.d_model % 2 != 0 {
            return Err(Error::Config("d_model must be even for the positional table".into()));
        }
        if self.output_dim == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::Config("output_dim, ffn_dim and max_len must be positive".into()));
        }
        if self.time_encoding.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Config("time_encoding scale must be positive and finite".into()));
        }
        if self.hc.streams() == 0 {
            return Err(Error::Config("hyper-connections need at least one stream".into()));
        }
        Ok(())
    }
}

/// A residual or hyper-connection around one sublayer, with its post-norm.
#[derive(Debug, Clone)]
pub struct Connection {
    pub hc: Option<HcParams>,
    pub norm: LayerNorm,
}

impl Connection {
    fn new(params: &mut Params, name: &str, cfg: &FluidConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let d = cfg.lan.d_model;
        let hc = match cfg.hc {
            HcMode::Residual => None,
            HcMode::Static { n } => Some(HcParams::new(params, &format!("{name}.hc"), n, d, false, rng)?),
            HcMode::Liquid { n } => Some(HcParams::new(params, &format!("{name}.hc"), n, d, true, rng)?),
        };
        Ok(Self {
            hc,
            norm: LayerNorm::new(params, &format!("{name}.norm"), d),
        })
    }

    /// `LN(x + L(x))`, or `LN(Ĥ)` per stream with hyper-connections.
    pub fn apply<'g, F>(&self, g: &'g Graph, params: &Params, h: &Var<'g>, sublayer: F) -> Result<Var<'g>>
    where
        F: FnOnce(&Var<'g>) -> Result<Var<'g>>,
    {
        match &self.hc {
            None => {
                let y = sublayer(h)?;
                self.norm.forward(g, params, &h.add(&y)?)
            }
            Some(hc) => {
                let c = hc_coefficients(g, params, hc, h)?;
                let x0 = hc_aggregate(&c, h)?;
                let y = sublayer(&x0)?;
                self.norm.forward(g, params, &hc_combine(&c, h, &y)?)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: LanLayer,
    pub attn_conn: Connection,
    pub ffn: FeedForward,
    pub ffn_conn: Connection,
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: LanLayer,
    pub self_conn: Connection,
    pub cross_attn: LanLayer,
    pub cross_conn: Connection,
    pub ffn: FeedForward,
    pub ffn_conn: Connection,
}

/// Attention diagnostics of one head, detached from the tape.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    /// `[B, T_q, K_eff]`
    pub weights: Tensor,
    pub selection: PairSelection,
    pub dt: f64,
    pub trajectory: Option<LogitTrajectory>,
}

#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub layer: String,
    pub heads: Vec<HeadTrace>,
}

impl AttentionTrace {
    /// Average weight each key position receives, over heads and query rows.
    /// Returns one value per key index.
    pub fn mean_key_mass(&self) -> Vec<f64> {
        let Some(first) = self.heads.first() else {
            return Vec::new();
        };
        let tk = first.selection.tk;
        let mut mass = vec![0.0; tk];
        let mut rows = 0usize;
        for h in &self.heads {
            let keff = h.selection.keff;
            for (r, w) in h.weights.data().chunks(keff).enumerate() {
                rows += 1;
                for (s, &x) in w.iter().enumerate() {
                    if let Some(j) = h.selection.key[r * keff + s] {
                        mass[j] += x;
                    }
                }
            }
        }
        mass.iter().map(|m| m / rows.max(1) as f64).collect()
    }
}

/// Batched, padded event sequences.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// `[B, T, input_dim]`
    pub values: Tensor,
    /// `[B, T]`
    pub times: Tensor,
    /// `B·T` entries, false on padding.
    pub mask: Vec<bool>,
}

impl ModelInput {
    pub fn new(values: Tensor, times: Tensor, mask: Vec<bool>) -> Result<Self> {
        let (vs, ts) = (values.shape(), times.shape());
        if vs.len() != 3 || ts.len() != 2 || vs[..2] != ts[..] || mask.len() != ts[0] * ts[1] {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: vs.to_vec(),
                rhs: ts.to_vec(),
            });
        }
        Ok(Self { values, times, mask })
    }

    /// Query slots carrying only target times (zero value features).
    pub fn queries(times: Tensor, input_dim: usize, mask: Vec<bool>) -> Result<Self> {
        let (b, t) = match times.shape() {
            &[b, t] => (b, t),
            s => return Err(crate::error::invalid(format!("query times must be [B, T], got {s:?}"))),
        };
        Self::new(Tensor::zeros(&[b, t, input_dim]), times, mask)
    }

    pub fn batch(&self) -> usize {
        self.times.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.times.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn key_mask(&self) -> Option<&[bool]> {
        (!self.mask.iter().all(|&m| m)).then_some(&self.mask[..])
    }
}

/// Parameter handles of the full network; values live in a [`Params`].
#[derive(Debug, Clone)]
pub struct FluidNet {
    pub cfg: FluidConfig,
    pub embed: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub decoder: Vec<DecoderLayer>,
    pub encoder_norm: Option<LayerNorm>,
    pub decoder_norm: Option<LayerNorm>,
    pub head: Linear,
    pe: Tensor,
}

fn take_trace(trace: &mut Option<&mut Vec<AttentionTrace>>, layer: String, heads: Vec<crate::lan::HeadOutput<'_>>) {
    if let Some(t) = trace.as_deref_mut() {
        t.push(AttentionTrace {
            layer,
            heads: heads
                .into_iter()
                .map(|h| HeadTrace {
                    weights: h.weights.value().clone(),
                    selection: h.selection,
                    dt: h.dt,
                    trajectory: h.trajectory,
                })
                .collect(),
        });
    }
}

impl FluidNet {
    pub fn new(params: &mut Params, cfg: FluidConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.lan.d_model;
        let embed = Linear::new(params, "embed", cfg.input_dim + 1, d, &mut rng);
        let enc_cfg = cfg.lan.clone();
        let mut self_cfg = cfg.lan.clone();
        self_cfg.causal = true;
        let mut cross_cfg = cfg.lan.clone();
        cross_cfg.causal = false;
        let mut encoder = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = format!("enc{l}");
            encoder.push(EncoderLayer {
                attn: LanLayer::new(params, &format!("{n}.attn"), enc_cfg.clone(), &mut rng)?,
                attn_conn: Connection::new(params, &format!("{n}.attn"), &cfg, &mut rng)?,
                ffn: FeedForward::new(params, &format!("{n}.ffn"), d, cfg.ffn_dim, &mut rng),
                ffn_conn: Connection::new(params, &format!("{n}.ffn"), &cfg, &mut rng)?,
            });
        }
        let mut decoder = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let n = format!("dec{l}");
            decoder.push(DecoderLayer {
                self_attn: LanLayer::new(params, &format!("{n}.self"), self_cfg.clone(), &mut rng)?,
                self_conn: Connection::new(params, &format!("{n}.self"), &cfg, &mut rng)?,
                cross_attn: LanLayer::new(params, &format!("{n}.cross"), cross_cfg.clone(), &mut rng)?,
                cross_conn: Connection::new(params, &format!("{n}.cross"), &cfg, &mut rng)?,
                ffn: FeedForward::new(params, &format!("{n}.ffn"), d, cfg.ffn_dim, &mut rng),
                ffn_conn: Connection::new(params, &format!("{n}.ffn"), &cfg, &mut rng)?,
            });
        }
        let finalize = !matches!(cfg.hc, HcMode::Residual);
        let encoder_norm = finalize.then(|| LayerNorm::new(params, "enc.final", d));
        let decoder_norm = finalize.then(|| LayerNorm::new(params, "dec.final", d));
        let head = Linear::new(params, "head", d, cfg.output_dim, &mut rng);
        let pe = positional_encoding(cfg.max_len, d)?;
        Ok(Self {
            cfg,
            embed,
            encoder,
            decoder,
            encoder_norm,
            decoder_norm,
            head,
            pe,
        })
    }

    /// Shared embedding of values and times plus the position table, `[B, T, d_model]`.
    pub fn embed<'g>(&self, g: &'g Graph, params: &Params, input: &ModelInput) -> Result<Var<'g>> {
        let (b, t) = (input.batch(), input.len());
        if t > self.cfg.max_len {
            return Err(crate::error::invalid(format!(
                "sequence length {t} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        if input.values.shape()[2] != self.cfg.input_dim {
            return Err(Error::ShapeMismatch {
                op: "embed",
                lhs: input.values.shape().to_vec(),
                rhs: vec![self.cfg.input_dim],
            });
        }
        let feats = concat(&[g.constant(input.values.clone()), g.constant(input.times.reshape(&[b, t, 1])?)], 2)?;
        let d = self.cfg.lan.d_model;
        let e = self.embed.forward(g, params, &feats)?;
        if let Some(scale) = self.cfg.time_encoding {
            return e.add(&g.constant(time_encoding(&input.times, d, scale)?));
        }
        let pe = Tensor::new(&[t * d], self.pe.data()[..t * d].to_vec())?;
        e.reshape(&[b, t * d])?.add_row(&g.constant(pe))?.reshape(&[b, t, d])
    }

    fn streams<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        match self.cfg.hc {
            HcMode::Residual => Ok(x.clone()),
            mode => hc_expand(x, mode.streams()),
        }
    }

    fn collapse<'g>(&self, g: &'g Graph, params: &Params, h: Var<'g>, norm: &Option<LayerNorm>) -> Result<Var<'g>> {
        match norm {
            Some(ln) => hc_network_finalize(g, params, &h, ln),
            None => Ok(h),
        }
    }

    /// Encoder stack on an embedded sequence `x: [B, T, d_model]`.
    pub fn encoder_forward<'g>(
        &self,
        g: &'g Graph,
        params: &Params,
        x: &Var<'g>,
        key_valid: Option<&[bool]>,
        mut trace: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Var<'g>> {
        if self.encoder.is_empty() {
            return Ok(x.clone());
        }
        let record = trace.is_some();
        let mut h = self.streams(x)?;
        for (l, layer) in self.encoder.iter().enumerate() {
            let mut heads = Vec::new();
            h = layer.attn_conn.apply(g, params, &h, |x0| {
                let out = layer.attn.forward(g, params, x0, x0, x0, key_valid, record)?;
                heads = out.heads;
                Ok(out.output)
            })?;
            take_trace(&mut trace, format!("enc{l}.attn"), heads);
            h = layer.ffn_conn.apply(g, params, &h, |x0| layer.ffn.forward(g, params, x0))?;
        }
        self.collapse(g, params, h, &self.encoder_norm)
    }

    /// Decoder stack on embedded queries `y` attending to the encoding `z`.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_forward<'g>(
        &self,
        g: &'g Graph,
        params: &Params,
        y: &Var<'g>,
        z: &Var<'g>,
        query_valid: Option<&[bool]>,
        memory_valid: Option<&[bool]>,
        mut trace: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Var<'g>> {
        if self.decoder.is_empty() {
            return Ok(y.clone());
        }
        let record = trace.is_some();
        let mut h = self.streams(y)?;
        for (l, layer) in self.decoder.iter().enumerate() {
            let mut heads = Vec::new();
            h = layer.self_conn.apply(g, params, &h, |x0| {
                let out = layer.self_attn.forward(g, params, x0, x0, x0, query_valid, record)?;
                heads = out.heads;
                Ok(out.output)
            })?;
            take_trace(&mut trace, format!("dec{l}.self"), std::mem::take(&mut heads));
            h = layer.cross_conn.apply(g, params, &h, |x0| {
                let out = layer.cross_attn.forward(g, params, x0, z, z, memory_valid, record)?;
                heads = out.heads;
                Ok(out.output)
            })?;
            take_trace(&mut trace, format!("dec{l}.cross"), heads);
            h = layer.ffn_conn.apply(g, params, &h, |x0| layer.ffn.forward(g, params, x0))?;
        }
        self.collapse(g, params, h, &self.decoder_norm)
    }

    /// Predictions `[B, T_q, output_dim]` at the query times.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        params: &Params,
        history: &ModelInput,
        queries: &ModelInput,
        mut trace: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Var<'g>> {
        if history.batch() != queries.batch() {
            return Err(Error::ShapeMismatch {
                op: "model_forward",
                lhs: history.times.shape().to_vec(),
                rhs: queries.times.shape().to_vec(),
            });
        }
        let x = self.embed(g, params, history)?;
        let z = self.encoder_forward(g, params, &x, history.key_mask(), trace.as_deref_mut())?;
        let y = self.embed(g, params, queries)?;
        let out = self.decoder_forward(g, params, &y, &z, queries.key_mask(), history.key_mask(), trace)?;
        self.head.forward(g, params, &out)
    }

    /// Encoder-only predictions `[B, T, output_dim]` at every input position.
    pub fn encode_predict<'g>(
        &self,
        g: &'g Graph,
        params: &Params,
        history: &ModelInput,
        trace: Option<&mut Vec<AttentionTrace>>,
    ) -> Result<Var<'g>> {
        let x = self.embed(g, params, history)?;
        let z = self.encoder_forward(g, params, &x, history.key_mask(), trace)?;
        self.head.forward(g, params, &z)
    }
}

/// A network together with its parameter values.
#[derive(Debug, Clone)]
pub struct FluidModel {
    pub net: FluidNet,
    pub params: Params,
}

impl FluidModel {
    pub fn new(cfg: FluidConfig) -> Result<Self> {
        let mut params = Params::new();
        let net = FluidNet::new(&mut params, cfg)?;
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &FluidConfig {
        &self.net.cfg
    }

    pub fn forward<'g>(&self, g: &'g Graph, history: &ModelInput, queries: &ModelInput) -> Result<Var<'g>> {
        self.net.forward(g, &self.params, history, queries, None)
    }

    /// Forward pass without a tape; returns plain predictions.
    pub fn predict(&self, history: &ModelInput, queries: &ModelInput) -> Result<Tensor> {
        let g = Graph::no_grad();
        let out = self.net.forward(&g, &self.params, history, queries, None)?;
        Ok(out.value().clone())
    }
}

/// Predictions of `model` at `queries` given `history`.
pub fn model_forward(model: &FluidModel, history: &ModelInput, queries: &ModelInput) -> Result<Tensor> {
    model.predict(history, queries)
}
