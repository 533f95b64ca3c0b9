use crate::error::{Error, Result};

/// `c[m×n] += op(a)[m×k] · op(b)[k×n]`, where `op` optionally transposes.
///
/// For the non-transposed case every output element accumulates its `k`
/// products in ascending order starting from the existing value of `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64]) {
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let row = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (cj, bj) in row.iter_mut().zip(brow) {
                        *cj += aip * bj;
                    }
                }
            }
        }
        (true, false) => {
            // a stored as [k, m]
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let aip = a[p * m + i];
                    let row = &mut c[i * n..(i + 1) * n];
                    for (cj, bj) in row.iter_mut().zip(brow) {
                        *cj += aip * bj;
                    }
                }
            }
        }
        (false, true) => {
            // b stored as [n, k]
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let bcol = &b[j * k..(j + 1) * k];
                    let dot: f64 = arow.iter().zip(bcol).map(|(x, y)| x * y).sum();
                    c[i * n + j] += dot;
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut dot = 0.0;
                    for p in 0..k {
                        dot += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += dot;
                }
            }
        }
    }
}

/// Precomputed block offsets for a batched, broadcasting matrix product.
#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub out_shape: Vec<usize>,
    /// (a block, b block, output block) per output batch element.
    pub blocks: Vec<(usize, usize, usize)>,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(mismatch());
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    let (m, k) = (am[0], am[1]);
    let (k2, n) = (bm[0], bm[1]);
    if k != k2 {
        return Err(mismatch());
    }
    let rank = ab.len().max(bb.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(ab), pad(bb));
    let mut batch = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            batch.push(x);
        } else if x == 1 {
            batch.push(y);
        } else {
            return Err(mismatch());
        }
    }
    let strides = |s: &[usize]| -> Vec<usize> {
        let mut st = vec![0; rank];
        let mut acc = 1;
        for d in (0..rank).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(&pa), strides(&pb));
    let count: usize = batch.iter().product();
    let mut blocks = Vec::with_capacity(count);
    let mut idx = vec![0usize; rank];
    for c in 0..count {
        let oa = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let ob = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        blocks.push((oa, ob, c));
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.extend_from_slice(&[m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        out_shape,
        blocks,
    })
}

impl MatmulPlan {
    pub fn forward(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for &(oa, ob, oc) in &self.blocks {
            gemm(
                m,
                k,
                n,
                &a[oa * m * k..(oa + 1) * m * k],
                false,
                &b[ob * k * n..(ob + 1) * k * n],
                false,
                &mut out[oc * m * n..(oc + 1) * m * n],
            );
        }
    }

    /// Accumulates `∂/∂a = g · bᵀ` (summed over broadcast batch dims).
    pub fn grad_a(&self, g: &[f64], b: &[f64], ga: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for &(oa, ob, oc) in &self.blocks {
            gemm(
                m,
                n,
                k,
                &g[oc * m * n..(oc + 1) * m * n],
                false,
                &b[ob * k * n..(ob + 1) * k * n],
                true,
                &mut ga[oa * m * k..(oa + 1) * m * k],
            );
        }
    }

    /// Accumulates `∂/∂b = aᵀ · g` (summed over broadcast batch dims).
    pub fn grad_b(&self, g: &[f64], a: &[f64], gb: &mut [f64]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for &(oa, ob, oc) in &self.blocks {
            gemm(
                k,
                m,
                n,
                &a[oa * m * k..(oa + 1) * m * k],
                true,
                &g[oc * m * n..(oc + 1) * m * n],
                false,
                &mut gb[ob * k * n..(ob + 1) * k * n],
            );
        }
    }
}
