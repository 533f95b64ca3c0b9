//! Query–key pair curation: the `u = [q; k]` gate inputs for liquid attention.
//!
//! Selection (which keys each query is paired with) is decided on values
//! and is not differentiated. Assembly gathers the chosen rows through the
//! tape so gradients reach the query and key projections.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{concat, Graph, Var, PAD_ROW};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// How many keys each query is paired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopK {
    /// Every key (full pairwise concatenation).
    Full,
    /// The `K` highest dot-product scores.
    K(usize),
}

impl TopK {
    pub fn effective(self, tk: usize) -> usize {
        match self {
            TopK::Full => tk,
            TopK::K(k) => k.min(tk),
        }
    }
}

/// Which key fills each (query, slot) position.
///
/// Slots are laid out row-major as `[batch, tq, keff]`. `key` is `None` for
/// padding slots (fewer than `keff` admissible keys); those carry zero
/// vectors. `valid` is false for padding and for causally masked keys.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSelection {
    pub batch: usize,
    pub tq: usize,
    pub tk: usize,
    pub keff: usize,
    pub key: Vec<Option<usize>>,
    pub valid: Vec<bool>,
}

impl PairSelection {
    pub fn num_pairs(&self) -> usize {
        self.key.len()
    }

    /// Flat row indices into the `[batch * tq, D]` query matrix.
    pub fn query_rows(&self) -> Rc<[usize]> {
        let per_batch = self.tq * self.keff;
        self.key
            .iter()
            .enumerate()
            .map(|(slot, key)| match key {
                Some(_) => slot / per_batch * self.tq + (slot % per_batch) / self.keff,
                None => PAD_ROW,
            })
            .collect()
    }

    /// Flat row indices into the `[batch * tk, D]` key (or value) matrix.
    pub fn key_rows(&self) -> Rc<[usize]> {
        let per_batch = self.tq * self.keff;
        self.key
            .iter()
            .enumerate()
            .map(|(slot, key)| match key {
                Some(j) => slot / per_batch * self.tk + j,
                None => PAD_ROW,
            })
            .collect()
    }

    pub fn valid_mask(&self) -> Rc<[bool]> {
        self.valid.clone().into()
    }

    /// Selected key indices with padding reported as 0.
    pub fn indices(&self) -> Vec<usize> {
        self.key.iter().map(|k| k.unwrap_or(0)).collect()
    }
}

/// Flattens `[.., T, D]` into (batch, T, D).
fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(invalid(format!("{what} must have rank >= 2, got {shape:?}")));
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

fn check_pair(q: &[usize], k: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (bq, tq, dq) = dims3(q, "queries")?;
    let (bk, tk, dk) = dims3(k, "keys")?;
    if dq != dk || bq != bk || q[..q.len() - 2] != k[..k.len() - 2] {
        return Err(Error::ShapeMismatch {
            op: "pair curation",
            lhs: q.to_vec(),
            rhs: k.to_vec(),
        });
    }
    Ok((bq, tq, tk, dq))
}

/// Decides the key set of every query.
///
/// Scores are raw dot products `q·k`. Masked keys (causal `j > i`, or
/// `key_valid == false`) are excluded before ranking. Ties go to the lower
/// key index. Chosen keys are listed in ascending key order so that with
/// `K >= T_k` the layout coincides with full pairwise concatenation.
pub fn select_pairs(q: &Tensor, k: &Tensor, top_k: TopK, causal: bool, key_valid: Option<&[bool]>) -> Result<PairSelection> {
    let (batch, tq, tk, d) = check_pair(q.shape(), k.shape())?;
    if let TopK::K(0) = top_k {
        return Err(invalid("top-k requires K >= 1"));
    }
    if let Some(kv) = key_valid {
        if kv.len() != batch * tk {
            return Err(invalid(format!("key mask has {} entries, expected {}", kv.len(), batch * tk)));
        }
    }
    let keff = top_k.effective(tk);
    let admissible = |b: usize, i: usize, j: usize| (!causal || j <= i) && key_valid.map_or(true, |kv| kv[b * tk + j]);
    let mut key = Vec::with_capacity(batch * tq * keff);
    let mut valid = Vec::with_capacity(batch * tq * keff);
    let (qd, kd) = (q.data(), k.data());
    for b in 0..batch {
        for i in 0..tq {
            match top_k {
                TopK::Full => {
                    for j in 0..tk {
                        key.push(Some(j));
                        valid.push(admissible(b, i, j));
                    }
                }
                TopK::K(_) => {
                    let qrow = &qd[(b * tq + i) * d..(b * tq + i + 1) * d];
                    let mut scored: Vec<(f64, usize)> = (0..tk)
                        .filter(|&j| admissible(b, i, j))
                        .map(|j| {
                            let krow = &kd[(b * tk + j) * d..(b * tk + j + 1) * d];
                            (qrow.iter().zip(krow).map(|(x, y)| x * y).sum(), j)
                        })
                        .collect();
                    scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
                    let mut chosen: Vec<usize> = scored.iter().take(keff).map(|s| s.1).collect();
                    chosen.sort_unstable();
                    for slot in 0..keff {
                        key.push(chosen.get(slot).copied());
                        valid.push(slot < chosen.len());
                    }
                }
            }
        }
    }
    Ok(PairSelection {
        batch,
        tq,
        tk,
        keff,
        key,
        valid,
    })
}

/// Builds `u = [q_tiled; k_selected]` of shape `[pairs, 2D]` on the tape.
pub fn assemble_pairs<'g>(q: &Var<'g>, k: &Var<'g>, sel: &PairSelection) -> Result<Var<'g>> {
    let d = *q.shape().last().unwrap_or(&0);
    let q_rows = q.reshape(&[sel.batch * sel.tq, d])?;
    let k_rows = k.reshape(&[sel.batch * sel.tk, d])?;
    let q_tiled = q_rows.gather_rows(sel.query_rows())?;
    let k_sel = k_rows.gather_rows(sel.key_rows())?;
    concat(&[q_tiled, k_sel], 1)
}

/// Concatenated pair inputs together with their selection.
#[derive(Debug, Clone)]
pub struct PairBatch {
    /// `[.., T_q, K_eff, 2D]`
    pub u: Tensor,
    pub selection: PairSelection,
}

impl PairBatch {
    pub fn selected_indices(&self) -> Vec<usize> {
        self.selection.indices()
    }

    pub fn valid_mask(&self) -> &[bool] {
        &self.selection.valid
    }

    pub fn keff(&self) -> usize {
        self.selection.keff
    }
}

fn build_batch(q: &Tensor, k: &Tensor, sel: PairSelection) -> Result<PairBatch> {
    let g = Graph::no_grad();
    let u = assemble_pairs(&g.constant(q.clone()), &g.constant(k.clone()), &sel)?;
    let mut shape = q.shape()[..q.rank() - 1].to_vec();
    shape.push(sel.keff);
    shape.push(2 * q.shape()[q.rank() - 1]);
    Ok(PairBatch {
        u: u.value().reshape(&shape)?,
        selection: sel,
    })
}

/// Pairs every query with every key, in key order.
pub fn full_pairwise_concat(q: &Tensor, k: &Tensor, causal: bool) -> Result<PairBatch> {
    let sel = select_pairs(q, k, TopK::Full, causal, None)?;
    build_batch(q, k, sel)
}

/// Pairs every query with its `K` best-scoring admissible keys.
pub fn topk_concat(q: &Tensor, k: &Tensor, top_k: usize, causal: bool) -> Result<PairBatch> {
    let sel = select_pairs(q, k, TopK::K(top_k), causal, None)?;
    build_batch(q, k, sel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn single_pair() {
        let pb = full_pairwise_concat(&t(&[1, 1, 2], &[1.0, 2.0]), &t(&[1, 1, 2], &[3.0, 4.0]), false).unwrap();
        assert_eq!(pb.u.shape(), &[1, 1, 1, 4]);
        assert_eq!(pb.u.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pb.valid_mask(), &[true]);
    }

    #[test]
    fn causal_first_row_sees_itself_only() {
        let q = Tensor::zeros(&[1, 3, 2]);
        let pb = full_pairwise_concat(&q, &q, true).unwrap();
        assert_eq!(&pb.valid_mask()[..3], &[true, false, false]);
        assert_eq!(&pb.valid_mask()[3..6], &[true, true, false]);
    }

    #[test]
    fn full_pairwise_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = Tensor::from_fn(&[1, 2, 3], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn(&[1, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let pb = full_pairwise_concat(&q, &k, false).unwrap();
        assert_eq!(pb.u.shape(), &[1, 2, 3, 6]);
        let mut oracle = Vec::new();
        for i in 0..2 {
            for j in 0..3 {
                oracle.extend_from_slice(&q.data()[i * 3..i * 3 + 3]);
                oracle.extend_from_slice(&k.data()[j * 3..j * 3 + 3]);
            }
        }
        assert_eq!(pb.u.data(), &oracle[..]);
    }

    #[test]
    fn multi_head_leading_dims() {
        let q = Tensor::from_fn(&[2, 3, 4, 2], |i| i as f64);
        let pb = topk_concat(&q, &q, 2, true).unwrap();
        assert_eq!(pb.u.shape(), &[2, 3, 4, 2, 4]);
    }

    #[test]
    fn topk_selects_best_scores() {
        let q = t(&[1, 1, 2], &[1.0, 0.0]);
        let k = t(&[1, 3, 2], &[2.0, 0.0, 1.0, 0.0, 0.0, 5.0]);
        // brute-force ranking: scores 2, 1, 0
        let scores: Vec<f64> = (0..3).map(|j| k.data()[j * 2]).collect();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let mut want = order[..2].to_vec();
        want.sort();
        let pb = topk_concat(&q, &k, 2, false).unwrap();
        assert_eq!(pb.selected_indices(), want);
        assert_eq!(want, vec![0, 1]);
    }

    #[test]
    fn ties_prefer_lower_index() {
        let q = t(&[1, 1, 2], &[1.0, 1.0]);
        let k = Tensor::ones(&[1, 4, 2]);
        let pb = topk_concat(&q, &k, 2, false).unwrap();
        assert_eq!(pb.selected_indices(), vec![0, 1]);
    }

    #[test]
    fn k_at_least_tk_equals_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let q = Tensor::from_fn(&[2, 3, 2], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::from_fn(&[2, 4, 2], |_| rng.gen_range(-1.0..1.0));
        let full = full_pairwise_concat(&q, &k, false).unwrap();
        let top = topk_concat(&q, &k, 10, false).unwrap();
        assert_eq!(top.keff(), 4);
        assert_eq!(full.u, top.u);
        assert_eq!(full.selection, top.selection);
    }

    #[test]
    fn causal_padding_is_zero_and_invalid() {
        let q = Tensor::ones(&[1, 3, 2]);
        let pb = topk_concat(&q, &q, 2, true).unwrap();
        // row 0 has one admissible key, second slot is padding
        assert_eq!(pb.selection.key[..2], [Some(0), None]);
        assert_eq!(&pb.valid_mask()[..2], &[true, false]);
        assert_eq!(&pb.u.data()[4..8], &[0.0; 4]);
    }

    #[test]
    fn zero_k_rejected() {
        let q = Tensor::ones(&[1, 2, 2]);
        assert!(topk_concat(&q, &q, 0, false).is_err());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(full_pairwise_concat(&Tensor::ones(&[1, 2, 3]), &Tensor::ones(&[1, 2, 2]), false).is_err());
    }

    #[test]
    fn payload_scales_with_k() {
        let q = Tensor::zeros(&[1, 1024, 2]);
        let top = topk_concat(&q, &q, 8, false).unwrap();
        let full_payload = 1024 * 1024 * 4;
        assert_eq!(top.u.numel() * 1024, full_payload * 8);
    }

    proptest! {
        #[test]
        fn causal_selection_never_looks_ahead(seed in any::<u64>(), tq in 1usize..9, k in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::from_fn(&[2, tq, 3], |_| rng.gen_range(-1.0..1.0));
            let sel = select_pairs(&x, &x, TopK::K(k), true, None).unwrap();
            for (slot, key) in sel.key.iter().enumerate() {
                let i = (slot / sel.keff) % tq;
                if let Some(j) = key {
                    prop_assert!(*j <= i);
                }
            }
            for row in sel.key.chunks(sel.keff) {
                let picked: Vec<usize> = row.iter().flatten().copied().collect();
                let mut dedup = picked.clone();
                dedup.dedup();
                prop_assert_eq!(picked.len(), dedup.len());
                prop_assert_eq!(picked.len(), row.iter().flatten().count());
            }
        }
    }
}
