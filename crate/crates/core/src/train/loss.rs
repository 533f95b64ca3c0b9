//! Masked losses and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
    CrossEntropy,
}

/// Expands a per-position mask to per-element 0/1 weights over `shape`,
/// where each mask entry covers a contiguous block of elements.
fn mask_weights(shape: &[usize], numel: usize, mask: Option<&[bool]>) -> Result<(Tensor, usize)> {
    let Some(mask) = mask else {
        return Ok((Tensor::ones(shape), numel));
    };
    if mask.is_empty() || numel % mask.len() != 0 {
        return Err(invalid(format!("mask of length {} does not tile {numel} elements", mask.len())));
    }
    let block = numel / mask.len();
    let w = Tensor::from_fn(shape, |i| if mask[i / block] { 1.0 } else { 0.0 });
    let count = mask.iter().filter(|&&m| m).count() * block;
    Ok((w, count))
}

/// Mean of the chosen loss over unmasked elements.
///
/// For regression `target` has the shape of `pred`. For cross-entropy `pred`
/// holds logits `[.., C]` and `target` holds class indices `[..]`. The mask
/// has one entry per position (per row of the last axis, or per element).
pub fn loss<'g>(kind: LossKind, pred: &Var<'g>, target: &Tensor, mask: Option<&[bool]>) -> Result<Var<'g>> {
    let g = pred.graph();
    match kind {
        LossKind::Mse | LossKind::Mae => {
            if pred.shape() != target.shape() {
                return Err(Error::ShapeMismatch {
                    op: "loss",
                    lhs: pred.shape().to_vec(),
                    rhs: target.shape().to_vec(),
                });
            }
            let (w, count) = mask_weights(pred.shape(), target.numel(), mask)?;
            if count == 0 {
                return Err(invalid("loss mask selects no elements"));
            }
            let diff = pred.sub(&g.constant(target.clone()))?;
            let per = if kind == LossKind::Mse { diff.square() } else { diff.abs() };
            Ok(per.mul(&g.constant(w))?.sum().scale(1.0 / count as f64))
        }
        LossKind::CrossEntropy => {
            let shape = pred.shape();
            let c = *shape.last().ok_or_else(|| invalid("cross-entropy needs class logits"))?;
            if shape[..shape.len() - 1] != *target.shape() {
                return Err(Error::ShapeMismatch {
                    op: "cross_entropy",
                    lhs: shape.to_vec(),
                    rhs: target.shape().to_vec(),
                });
            }
            let rows = target.numel();
            let (w, count) = mask_weights(target.shape(), rows, mask)?;
            if count == 0 {
                return Err(invalid("loss mask selects no elements"));
            }
            let mut onehot = Tensor::zeros(shape);
            for (r, &cls) in target.data().iter().enumerate() {
                let k = cls as usize;
                if cls < 0.0 || k >= c || cls.fract() != 0.0 {
                    return Err(invalid(format!("class index {cls} outside 0..{c}")));
                }
                onehot.data_mut()[r * c + k] = w.data()[r];
            }
            let logp = pred.log_softmax()?;
            Ok(logp.mul(&g.constant(onehot))?.sum().scale(-1.0 / count as f64))
        }
    }
}

/// Mean absolute error over unmasked elements.
pub fn mae(pred: &Tensor, target: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mae",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let (w, count) = mask_weights(pred.shape(), pred.numel(), mask)?;
    if count == 0 {
        return Err(invalid("metric mask selects no elements"));
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(w.data())
        .map(|((p, t), w)| (p - t).abs() * w)
        .sum();
    Ok(s / count as f64)
}

/// Fraction of unmasked rows whose arg-max logit matches the class index.
pub fn accuracy(logits: &Tensor, target: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
    let c = *logits.shape().last().ok_or_else(|| invalid("accuracy needs class logits"))?;
    let rows = target.numel();
    if c == 0 || logits.numel() != rows * c {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            lhs: logits.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (r, row) in logits.data().chunks(c).enumerate() {
        if mask.is_some_and(|m| !m[r]) {
            continue;
        }
        let best = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
            .0;
        total += 1;
        hits += usize::from(best as f64 == target.data()[r]);
    }
    if total == 0 {
        return Err(invalid("metric mask selects no elements"));
    }
    Ok(hits as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn value(kind: LossKind, pred: Tensor, target: &Tensor, mask: Option<&[bool]>) -> Result<f64> {
        let g = Graph::new();
        let p = g.constant(pred);
        Ok(loss(kind, &p, target, mask)?.value().item())
    }

    #[test]
    fn identical_prediction_has_zero_loss() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.7 - 1.0);
        assert_eq!(value(LossKind::Mse, t.clone(), &t, None).unwrap(), 0.0);
        assert_eq!(value(LossKind::Mae, t.clone(), &t, None).unwrap(), 0.0);
    }

    #[test]
    fn single_element_values() {
        let (p, t) = (Tensor::zeros(&[1]), Tensor::full(&[1], 2.0));
        assert_eq!(value(LossKind::Mse, p.clone(), &t, None).unwrap(), 4.0);
        assert_eq!(value(LossKind::Mae, p, &t, None).unwrap(), 2.0);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        for c in [2usize, 5, 10] {
            let ce = value(LossKind::CrossEntropy, Tensor::full(&[3, c], 0.4), &Tensor::zeros(&[3]), None).unwrap();
            assert!((ce - (c as f64).ln()).abs() < 1e-14);
        }
    }

    #[test]
    fn mask_excludes_padding() {
        // rows of 2 features, second row padded
        let p = Tensor::new(&[2, 2], vec![1.0, 1.0, 100.0, -50.0]).unwrap();
        let t = Tensor::zeros(&[2, 2]);
        let m = [true, false];
        assert_eq!(value(LossKind::Mse, p.clone(), &t, Some(&m)).unwrap(), 1.0);
        assert_eq!(mae(&p, &t, Some(&m)).unwrap(), 1.0);
        let ce = value(LossKind::CrossEntropy, p, &Tensor::zeros(&[2]), Some(&m)).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let t = Tensor::zeros(&[2, 2]);
        assert!(value(LossKind::Mse, t.clone(), &t, Some(&[false, false])).is_err());
        assert!(value(LossKind::CrossEntropy, t.clone(), &Tensor::zeros(&[2]), Some(&[false, false])).is_err());
        assert!(mae(&t, &t, Some(&[false, false])).is_err());
    }

    #[test]
    fn bad_class_index_is_rejected() {
        let t = Tensor::zeros(&[1, 3]);
        assert!(value(LossKind::CrossEntropy, t, &Tensor::full(&[1], 3.0), None).is_err());
    }

    #[test]
    fn loss_gradients_match_differences() {
        let target = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new(&[3], vec![1.0, 0.2, -0.3]).unwrap();
        for kind in [LossKind::Mse, LossKind::Mae] {
            let r = crate::train::gradcheck::check_gradients(&[x.clone()], 1e-5, |v| loss(kind, &v[0], &target, None)).unwrap();
            assert!(r.max_rel_error < 1e-6, "{kind:?} {r:?}");
        }
        let logits = Tensor::new(&[2, 3], vec![0.1, -0.4, 1.2, 0.0, 0.3, -2.0]).unwrap();
        let cls = Tensor::new(&[2], vec![2.0, 0.0]).unwrap();
        let r = crate::train::gradcheck::check_gradients(&[logits], 1e-5, |v| loss(LossKind::CrossEntropy, &v[0], &cls, None)).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::new(&[3, 2], vec![1.0, 0.0, 0.0, 1.0, 5.0, 1.0]).unwrap();
        let cls = Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap();
        assert!((accuracy(&logits, &cls, None).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&logits, &cls, Some(&[true, false, true])).unwrap(), 1.0);
    }
}
