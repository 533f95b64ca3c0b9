//! Synthetic datasets: irregularly sampled spirals and run-length event
//! encoding of pixel rows, plus their CSV format.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::ModelInput;
use crate::tensor::Tensor;
use crate::train::Sample;

/// Padded, irregularly timed feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSequence {
    /// `[T, F]`
    pub values: Tensor,
    pub times: Vec<f64>,
    /// False on the padded tail.
    pub mask: Vec<bool>,
}

impl EventSequence {
    pub fn new(values: Tensor, times: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        let s = Self { values, times, mask };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.times.len();
        if self.values.rank() != 2 || self.values.shape()[0] != t || self.mask.len() != t {
            return Err(Error::Format(format!(
                "values {:?}, {} times and {} mask entries disagree",
                self.values.shape(),
                t,
                self.mask.len()
            )));
        }
        let valid = self.valid_len();
        if self.mask[valid..].iter().any(|&m| m) {
            return Err(Error::Format("mask must be a valid prefix followed by padding".into()));
        }
        if self.times[..valid].windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Format("times must increase strictly on valid entries".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn features(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn valid_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.features();
        &self.values.data()[i * f..(i + 1) * f]
    }

    /// Keeps the valid rows at `idx` (in order) and pads to `pad_to`.
    pub fn select(&self, idx: &[usize], pad_to: usize) -> Result<Self> {
        if idx.len() > pad_to {
            return Err(invalid(format!("{} rows do not fit into {pad_to}", idx.len())));
        }
        let f = self.features();
        let mut values = vec![0.0; pad_to * f];
        let mut times = vec![0.0; pad_to];
        let mut mask = vec![false; pad_to];
        for (r, &i) in idx.iter().enumerate() {
            values[r * f..(r + 1) * f].copy_from_slice(self.row(i));
            times[r] = self.times[i];
            mask[r] = true;
        }
        let last = idx.last().map_or(0.0, |&i| self.times[i]);
        times[idx.len()..].iter_mut().for_each(|t| *t = last);
        Self::new(Tensor::new(&[pad_to, f], values)?, times, mask)
    }
}

fn default_r0() -> f64 {
    0.1
}
fn default_slope() -> f64 {
    0.02
}
fn default_t_max() -> f64 {
    6.0 * PI
}
fn default_split() -> (f64, f64, f64) {
    (0.6, 0.2, 0.2)
}

/// Archimedean spiral family `r(t) = r0 + slope·t`, `t ∈ [0, t_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpiralSpec {
    pub n_spirals: usize,
    pub n_points: usize,
    pub n_subsample: usize,
    pub noise_std: f64,
    pub seed: u64,
    #[serde(default = "default_r0")]
    pub r0: f64,
    #[serde(default = "default_slope")]
    pub slope: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    /// Conditioning, interpolation and extrapolation shares of the time span.
    #[serde(default = "default_split")]
    pub split: (f64, f64, f64),
    /// Draw a random starting angle per spiral; otherwise only the turning
    /// direction varies.
    #[serde(default)]
    pub random_phase: bool,
}

impl SpiralSpec {
    pub fn new(n_spirals: usize, n_points: usize, n_subsample: usize, seed: u64) -> Self {
        Self {
            n_spirals,
            n_points,
            n_subsample,
            noise_std: 0.02,
            seed,
            r0: default_r0(),
            slope: default_slope(),
            t_max: default_t_max(),
            split: default_split(),
            random_phase: false,
        }
    }

    /// 300 spirals of 150 uniform points, 50 kept per spiral.
    pub fn full_scale(seed: u64) -> Self {
        Self::new(300, 150, 50, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let (c, i, e) = self.split;
        if self.n_points < 2 || self.n_subsample == 0 || self.n_subsample > self.n_points {
            return Err(Error::Config(format!(
                "need 0 < n_subsample ({}) ≤ n_points ({}) and n_points ≥ 2",
                self.n_subsample, self.n_points
            )));
        }
        if !(self.noise_std >= 0.0) || !(self.t_max > 0.0) || !(self.slope > 0.0) || !(self.r0 >= 0.0) {
            return Err(Error::Config("noise_std, r0 must be ≥ 0 and slope, t_max > 0".into()));
        }
        if [c, i, e].iter().any(|&x| !(x >= 0.0)) || c <= 0.0 || ((c + i + e) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split {:?} must be nonnegative, sum to 1, and condition on something",
                self.split
            )));
        }
        Ok(())
    }

    pub fn radius(&self, t: f64) -> f64 {
        self.r0 + self.slope * t
    }
}

/// Orientation of one spiral: starting angle and turning direction (±1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpiralShape {
    pub phase: f64,
    pub direction: f64,
}

/// Noise-free point of the spiral at time `t`.
pub fn spiral_point(spec: &SpiralSpec, shape: SpiralShape, t: f64) -> [f64; 2] {
    let r = spec.radius(t);
    let angle = shape.phase + shape.direction * t;
    [r * angle.cos(), r * angle.sin()]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spiral {
    pub shape: SpiralShape,
    /// Noisy subsampled points sorted by time, no padding.
    pub points: EventSequence,
}

/// Uniform grid, additive Gaussian noise, then a sorted subsample without
/// replacement for each spiral.
pub fn generate_spirals(spec: &SpiralSpec) -> Result<Vec<Spiral>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let step = spec.t_max / (spec.n_points - 1) as f64;
    let mut out = Vec::with_capacity(spec.n_spirals);
    for _ in 0..spec.n_spirals {
        let phase = rng.gen_range(0.0..2.0 * PI);
        let shape = SpiralShape {
            phase: if spec.random_phase { phase } else { 0.0 },
            direction: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
        };
        let grid: Vec<[f64; 2]> = (0..spec.n_points)
            .map(|n| {
                let [x, y] = spiral_point(spec, shape, n as f64 * step);
                [x + noise.sample(&mut rng), y + noise.sample(&mut rng)]
            })
            .collect();
        let mut keep = sample_indices(&mut rng, spec.n_points, spec.n_subsample).into_vec();
        keep.sort_unstable();
        let values = keep.iter().flat_map(|&n| grid[n]).collect();
        let times = keep.iter().map(|&n| n as f64 * step).collect();
        let points = EventSequence::new(Tensor::new(&[keep.len(), 2], values)?, times, vec![true; keep.len()])?;
        out.push(Spiral { shape, points });
    }
    Ok(out)
}

/// Row indices of the conditioning, interpolation and extrapolation parts.
///
/// Points after `(c + i)·t_max` are extrapolation targets. Earlier points are
/// conditioning, except a regular `i / (c + i)` share held out for
/// interpolation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpiralSplit {
    pub conditioning: Vec<usize>,
    pub interpolation: Vec<usize>,
    pub extrapolation: Vec<usize>,
}

pub fn split_segments(spec: &SpiralSpec, seq: &EventSequence) -> SpiralSplit {
    let (c, i, _) = spec.split;
    let cut = (c + i) * spec.t_max;
    let hold = if i > 0.0 {
        ((c + i) / i).round().max(2.0) as usize
    } else {
        usize::MAX
    };
    let mut s = SpiralSplit {
        conditioning: Vec::new(),
        interpolation: Vec::new(),
        extrapolation: Vec::new(),
    };
    let mut early = 0usize;
    for r in 0..seq.valid_len() {
        if seq.times[r] > cut {
            s.extrapolation.push(r);
        } else {
            early += 1;
            if early % hold == 0 {
                s.interpolation.push(r);
            } else {
                s.conditioning.push(r);
            }
        }
    }
    s
}

/// Training samples: conditioning points as history, held-out points as
/// queries and targets. Times are divided by `t_max`; each part is padded to
/// its longest instance in `spirals`.
pub fn spiral_samples(spec: &SpiralSpec, spirals: &[Spiral]) -> Result<Vec<Sample>> {
    let seqs: Vec<EventSequence> = spirals.iter().map(|s| s.points.clone()).collect();
    segment_samples(spec, &seqs)
}

/// [`spiral_samples`] for bare two-feature sequences.
pub fn segment_samples(spec: &SpiralSpec, seqs: &[EventSequence]) -> Result<Vec<Sample>> {
    if seqs.iter().any(|s| s.features() != 2) {
        return Err(invalid("spiral sequences carry exactly two features"));
    }
    let parts: Vec<(Vec<usize>, Vec<usize>)> = seqs
        .iter()
        .map(|s| {
            let split = split_segments(spec, s);
            let mut held: Vec<usize> = split.interpolation.iter().chain(&split.extrapolation).copied().collect();
            held.sort_unstable();
            (split.conditioning, held)
        })
        .collect();
    if parts.iter().any(|(c, h)| c.is_empty() || h.is_empty()) {
        return Err(invalid("spiral has an empty conditioning or target segment"));
    }
    let pad_h = parts.iter().map(|p| p.0.len()).max().unwrap_or(0);
    let pad_q = parts.iter().map(|p| p.1.len()).max().unwrap_or(0);
    let scale = 1.0 / spec.t_max;
    seqs.iter()
        .zip(&parts)
        .map(|(s, (cond, held))| {
            let hist = s.select(cond, pad_h)?;
            let tgt = s.select(held, pad_q)?;
            let times = |e: &EventSequence| Tensor::from_fn(&[1, e.len()], |i| e.times[i] * scale);
            Ok(Sample {
                history: ModelInput::new(hist.values.reshape(&[1, pad_h, 2])?, times(&hist), hist.mask.clone())?,
                queries: ModelInput::queries(times(&tgt), 2, tgt.mask.clone())?,
                target: tgt.values.reshape(&[1, pad_q, 2])?,
                target_mask: tgt.mask,
            })
        })
        .collect()
}

/// Binarizes at `threshold` and run-length encodes into events with value
/// features `[bit]` and time equal to the cumulative end of each run.
pub fn event_encode(pixels: &[f64], threshold: f64, pad_to: usize) -> Result<EventSequence> {
    let mut values = Vec::new();
    let mut times = Vec::new();
    for (n, &p) in pixels.iter().enumerate() {
        let bit = if p >= threshold { 1.0 } else { 0.0 };
        if values.last() == Some(&bit) {
            *times.last_mut().expect("times track values") = (n + 1) as f64;
        } else {
            values.push(bit);
            times.push((n + 1) as f64);
        }
    }
    let len = values.len();
    if len > pad_to {
        return Err(invalid(format!("{len} events exceed the padded length {pad_to}")));
    }
    let last = times.last().copied().unwrap_or(0.0);
    values.resize(pad_to, 0.0);
    times.resize(pad_to, last);
    let mut mask = vec![true; len];
    mask.resize(pad_to, false);
    EventSequence::new(Tensor::new(&[pad_to, 1], values)?, times, mask)
}

/// Expands events back into the binary pixel sequence.
pub fn event_decode(seq: &EventSequence) -> Vec<f64> {
    let mut out = Vec::new();
    let mut prev = 0.0;
    for i in 0..seq.valid_len() {
        let run = (seq.times[i] - prev).round() as usize;
        out.extend(std::iter::repeat(seq.row(i)[0]).take(run));
        prev = seq.times[i];
    }
    out
}

/// Writes sequences as CSV with columns `seq_id, t, feature_0.., mask`.
pub fn write_sequences_csv(seqs: &[EventSequence], path: &Path) -> Result<()> {
    let f = seqs.first().map_or(0, |s| s.features());
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["seq_id".to_string(), "t".to_string()];
    header.extend((0..f).map(|k| format!("feature_{k}")));
    header.push("mask".into());
    w.write_record(&header)?;
    for (id, s) in seqs.iter().enumerate() {
        if s.features() != f {
            return Err(invalid("sequences must share a feature count"));
        }
        for r in 0..s.len() {
            let mut rec = vec![id.to_string(), s.times[r].to_string()];
            rec.extend(s.row(r).iter().map(|v| v.to_string()));
            rec.push(u8::from(s.mask[r]).to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_sequences_csv(path: &Path) -> Result<Vec<EventSequence>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let n = header.len();
    if n < 3 || &header[0] != "seq_id" || &header[1] != "t" || &header[n - 1] != "mask" {
        return Err(Error::Format(format!("unexpected header {header:?}")));
    }
    let f = n - 3;
    let mut rows: BTreeMap<usize, (Vec<f64>, Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad number {:?}", &rec[i])))
        };
        let id: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("bad seq_id {:?}", &rec[0])))?;
        let e = rows.entry(id).or_default();
        e.1.push(num(1)?);
        for k in 0..f {
            e.0.push(num(2 + k)?);
        }
        e.2.push(match rec[n - 1].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(Error::Format(format!("bad mask {other:?}"))),
        });
    }
    rows.into_values()
        .map(|(v, t, m)| EventSequence::new(Tensor::new(&[t.len(), f], v)?, t, m))
        .collect()
}
