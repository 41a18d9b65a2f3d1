//! Loop-based reference implementations shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

pub fn random_signs(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

pub fn cosine_loop(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if na.sqrt() < 1e-12 || nb.sqrt() < 1e-12 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn rows(x: ArrayView2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn cosine_matrix_loop(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Vec<Vec<f64>> {
    let (xr, yr) = (rows(x), rows(y));
    xr.iter()
        .map(|a| yr.iter().map(|b| cosine_loop(a, b)).collect())
        .collect()
}

fn frob_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in 0..a[i].len() {
            s += (a[i][j] - b[i][j]).powi(2);
        }
    }
    s.sqrt()
}

/// `(l_c, l_g, l_i, total)` evaluated entry by entry.
pub fn loss_oracle(
    hi: ArrayView2<f64>,
    ht: ArrayView2<f64>,
    s: ArrayView2<f64>,
    lambda1: f64,
    lambda2: f64,
    target: f64,
) -> (f64, f64, f64, f64) {
    let mats = [
        cosine_matrix_loop(hi, hi),
        cosine_matrix_loop(ht, ht),
        cosine_matrix_loop(hi, ht),
        cosine_matrix_loop(ht, hi),
    ];
    let sv = rows(s);
    let l_g: f64 = mats.iter().map(|m| frob_diff(m, &sv)).sum();
    let mut l_i = 0.0;
    for a in 0..4 {
        for b in (a + 1)..4 {
            l_i += frob_diff(&mats[a], &mats[b]);
        }
    }
    let l_c = (0..hi.nrows())
        .map(|i| (mats[2][i][i] - target).powi(2))
        .sum::<f64>()
        .sqrt();
    (l_c, l_g, l_i, l_c + lambda1 * l_g + lambda2 * l_i)
}

/// Row `i` keeps its `k` largest entries (ties to the lower index),
/// normalized to sum to one.
pub fn knn_oracle(dist: ArrayView2<f64>, k: usize) -> Array2<f64> {
    let m = dist.nrows();
    let mut out = Array2::zeros((m, m));
    for i in 0..m {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| dist[[i, b]].partial_cmp(&dist[[i, a]]).unwrap().then(a.cmp(&b)));
        let keep = &order[..k];
        let sum: f64 = keep.iter().map(|&j| dist[[i, j]]).sum();
        for &j in keep {
            out[[i, j]] = dist[[i, j]] / sum;
        }
    }
    out
}

pub fn matmul_transpose_loop(a: &Array2<f64>) -> Array2<f64> {
    let m = a.nrows();
    let mut out = Array2::zeros((m, m));
    for i in 0..m {
        for j in 0..m {
            let mut s = 0.0;
            for q in 0..a.ncols() {
                s += a[[i, q]] * a[[j, q]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

/// Hamming distance between two `±1` vectors.
pub fn hamming_loop(a: &[f64], b: &[f64]) -> u32 {
    a.iter().zip(b).filter(|(x, y)| (**x > 0.0) != (**y > 0.0)).count() as u32
}

/// Average precision of a ranked relevance list, `None` without any
/// relevant item.
pub fn ap_oracle(ranked: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in ranked.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Ranks `db` rows for `query` by Hamming distance, ties to the lower index.
pub fn rank_loop(query: &[f64], db: &Array2<f64>) -> Vec<usize> {
    let d: Vec<u32> = db.rows().into_iter().map(|r| hamming_loop(query, r.as_slice().unwrap())).collect();
    let mut order: Vec<usize> = (0..db.nrows()).collect();
    order.sort_by_key(|&j| (d[j], j));
    order
}

pub fn shares_label(a: ndarray::ArrayView1<u8>, b: ndarray::ArrayView1<u8>) -> bool {
    a.iter().zip(b.iter()).any(|(x, y)| *x != 0 && *y != 0)
}
