use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Sinusoidal table `[T, d]`: `sin(pos/10000^{2i/d})` on even columns and
/// `cos` of the same angle on odd ones.
pub fn positional_encoding(t: usize, d: usize) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(invalid(format!("positional encoding needs an even width, got {d}")));
    }
    Ok(Tensor::from_fn(&[t, d], |i| sinusoid((i / d) as f64, i % d, d)))
}

/// Column `col` of the width-`d` sinusoidal code at a real position.
pub fn sinusoid(pos: f64, col: usize, d: usize) -> f64 {
    let pair = (col / 2) as f64;
    let angle = pos / 10000f64.powf(2.0 * pair / d as f64);
    if col % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

/// Sinusoidal code of each timestamp `times: [B, T]` scaled by `scale`, as `[B, T, d]`.
pub fn time_encoding(times: &Tensor, d: usize, scale: f64) -> Result<Tensor> {
    if d % 2 != 0 {
        return Err(invalid(format!("time encoding needs an even width, got {d}")));
    }
    let (b, t) = match times.shape() {
        &[b, t] => (b, t),
        s => return Err(invalid(format!("times must be [B, T], got {s:?}"))),
    };
    let ts = times.data();
    Ok(Tensor::from_fn(&[b, t, d], |i| sinusoid(ts[i / d] * scale, i % d, d)))
}
