//! Feature-space similarities and graph-neighbor coherence.
//!
//! The pipeline runs in four stages over a training set of `m` pairs:
//!
//! 1. [`pairwise_distance`]: a convex blend of the image-cosine and
//!    text-cosine matrices. Despite the name, larger means more similar.
//! 2. [`conditional_prob`]: each node keeps its `k` most similar nodes
//!    (itself included, unless configured otherwise) and spreads unit mass
//!    over them in proportion to the distance.
//! 3. [`gc_probability`]: the probability that two nodes agree, summed over
//!    every shared intermediate node, i.e. `P = Pc · Pcᵀ`.
//! 4. [`gc_final`]: `2 * ((1 - γ) d + γ β P) - 1`, the matrix the losses
//!    fit.
//!
//! Dense `m × m` matrices bound the usable training size; with `f64` storage
//! a GC model takes roughly `24 m²` bytes, so `m ≈ 20000` is a practical
//! ceiling on a workstation.

mod cache;
mod sparse;

pub use cache::{cache_key, load_gc_model, save_gc_model, GcCache};
pub use sparse::RowSparse;

use ndarray::{Array2, ArrayView1, ArrayView2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PairedDataset;
use crate::error::{Error, Result};

/// Norms below this count as zero in cosine computations.
pub const NORM_EPS: f64 = 1e-12;

/// Cosine similarity; 0 when either vector has (near) zero norm.
pub fn cosine(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "cosine of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let nx = x.dot(&x).sqrt();
    let ny = y.dot(&y).sqrt();
    if nx < NORM_EPS || ny < NORM_EPS {
        return Ok(0.0);
    }
    Ok((x.dot(&y) / (nx * ny)).clamp(-1.0, 1.0))
}

/// Rows scaled to unit L2 norm; rows with norm below [`NORM_EPS`] become zero.
pub fn normalize_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n < NORM_EPS {
            row.fill(0.0);
        } else {
            row.mapv_inplace(|v| v / n);
        }
    }
    out
}

/// `(i, j) -> cosine(x_i, y_j)`.
pub fn cosine_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "cosine_matrix with {} and {} columns",
            x.ncols(),
            y.ncols()
        )));
    }
    let xn = normalize_rows(x);
    let yn = normalize_rows(y);
    Ok(xn.dot(&yn.t()).mapv(|v| v.clamp(-1.0, 1.0)))
}

/// Cosine matrix of a set with itself, bitwise symmetric, with an exact unit
/// diagonal for nonzero rows (and zero for zero rows).
pub fn self_cosine(x: ArrayView2<f64>) -> Array2<f64> {
    let xn = normalize_rows(x);
    let mut c = xn.dot(&xn.t());
    let n = c.nrows();
    for i in 0..n {
        let nonzero = xn.row(i).iter().any(|&v| v != 0.0);
        c[[i, i]] = if nonzero { 1.0 } else { 0.0 };
        for j in (i + 1)..n {
            let v = c[[i, j]].clamp(-1.0, 1.0);
            c[[i, j]] = v;
            c[[j, i]] = v;
        }
    }
    c
}

pub(crate) fn to_f64(x: &Array2<f32>) -> Array2<f64> {
    x.mapv(f64::from)
}

/// `(1 - alpha) * C(img, img) + alpha * C(txt, txt)`.
pub fn pairwise_distance(ds: &PairedDataset, alpha: f64) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!("alpha {alpha} not in [0, 1]")));
    }
    let ci = self_cosine(to_f64(ds.img()).view());
    let ct = self_cosine(to_f64(ds.txt()).view());
    Ok(blend(&ci, &ct, alpha))
}

pub(crate) fn blend(ci: &Array2<f64>, ct: &Array2<f64>, alpha: f64) -> Array2<f64> {
    let mut out = Array2::zeros(ci.raw_dim());
    Zip::from(&mut out)
        .and(ci)
        .and(ct)
        .for_each(|o, &a, &b| *o = (1.0 - alpha) * a + alpha * b);
    out
}

/// Neighbor weights: every row keeps its `k` largest-distance columns,
/// normalized to sum to one.
///
/// Ties at the k-th position go to the smaller column index. With
/// `include_self` the node itself is a candidate (and, having the maximal
/// self-distance of 1, is always selected); otherwise it is skipped.
pub fn conditional_prob(dist: ArrayView2<f64>, k: usize, include_self: bool) -> Result<RowSparse> {
    let m = dist.nrows();
    if dist.ncols() != m {
        return Err(Error::DimensionMismatch(format!(
            "distance matrix is {m}x{}",
            dist.ncols()
        )));
    }
    let pool = if include_self { m } else { m.saturating_sub(1) };
    if k == 0 || k > pool {
        return Err(Error::InvalidParameter(format!(
            "k = {k} must lie in [1, {pool}]"
        )));
    }
    if let Some(((i, j), v)) = dist
        .indexed_iter()
        .find(|(_, v)| !v.is_finite() || **v < 0.0)
    {
        return Err(Error::InvalidParameter(format!(
            "distance entry ({i}, {j}) = {v} must be finite and non-negative"
        )));
    }

    let rows: Vec<Result<Vec<(u32, f64)>>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let row = dist.row(i);
            let mut cand: Vec<u32> = (0..m as u32)
                .filter(|&q| include_self || q as usize != i)
                .collect();
            let by_rank = |a: &u32, b: &u32| {
                row[*b as usize]
                    .total_cmp(&row[*a as usize])
                    .then(a.cmp(b))
            };
            if k < cand.len() {
                cand.select_nth_unstable_by(k - 1, by_rank);
                cand.truncate(k);
            }
            cand.sort_unstable();
            let total: f64 = cand.iter().map(|&q| row[q as usize]).sum();
            if total <= 0.0 {
                return Err(Error::IsolatedNode(i));
            }
            Ok(cand.into_iter().map(|q| (q, row[q as usize] / total)).collect())
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(RowSparse::from_rows(m, rows))
}

/// `P = Pc · Pcᵀ` using an inverted index over shared neighbors.
///
/// Row `i` only visits the columns it touches and, through each, the rows
/// sharing that column, so the cost is `Σ_q nnz(col q)²` instead of `m³`.
/// Both `P[i, j]` and `P[j, i]` accumulate the same products in the same
/// (ascending column) order, so the result is bitwise symmetric.
pub fn gc_probability(pcond: &RowSparse) -> Array2<f64> {
    let m = pcond.n_rows();
    let cols = pcond.columns();
    let mut out = Array2::<f64>::zeros((m, m));
    out.axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut out_row)| {
            let (idx, vals) = pcond.row(i);
            for (&q, &a) in idx.iter().zip(vals) {
                for &(j, b) in &cols[q as usize] {
                    out_row[j as usize] += a * b;
                }
            }
        });
    out
}

/// `2 * ((1 - gamma) * dist + gamma * beta * prob) - 1`, elementwise.
pub fn gc_final(
    dist: ArrayView2<f64>,
    prob: ArrayView2<f64>,
    gamma: f64,
    beta: f64,
) -> Result<Array2<f64>> {
    if dist.dim() != prob.dim() {
        return Err(Error::DimensionMismatch(format!(
            "dist {:?} vs prob {:?}",
            dist.dim(),
            prob.dim()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidParameter(format!("gamma {gamma} not in [0, 1]")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidParameter(format!("beta {beta} must be > 0")));
    }
    let mut out = Array2::zeros(dist.raw_dim());
    Zip::from(&mut out)
        .and(dist)
        .and(prob)
        .for_each(|o, &d, &p| {
            let s = (1.0 - gamma) * d + gamma * (beta * p);
            *o = 2.0 * s - 1.0;
        });
    Ok(out)
}

/// `1 / mean(diag(prob))`, which puts `β P` on the same scale as the
/// distances.
pub fn auto_beta(prob: ArrayView2<f64>) -> Result<f64> {
    let n = prob.nrows();
    let mean = prob.diag().sum() / n as f64;
    if mean.is_nan() || mean <= 0.0 {
        return Err(Error::InvalidParameter("GC probability has a zero diagonal".into()));
    }
    Ok(1.0 / mean)
}

/// Which similarity feeds the training target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GcMode {
    /// Blend of distance and coherence, weighted by `gamma`.
    #[default]
    Full,
    /// Distance only (`gamma` forced to 0).
    PairwiseOnly,
    /// Coherence only (`gamma` forced to 1).
    NoPairwise,
}

impl std::str::FromStr for GcMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(GcMode::Full),
            "pairwise-only" => Ok(GcMode::PairwiseOnly),
            "no-pairwise" => Ok(GcMode::NoPairwise),
            other => Err(format!(
                "unknown gc mode {other:?} (full, pairwise-only, no-pairwise)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GcParams {
    /// Weight of the text cosine in the fused distance.
    pub alpha: f64,
    /// Weight of the coherence term against the distance term.
    pub gamma: f64,
    /// Scale of the coherence probability.
    pub beta: f64,
    /// Neighbors per node.
    pub k: usize,
    /// Replace `beta` with `1 / mean(diag(P))`.
    pub auto_beta: bool,
    /// Count a node among its own neighbors.
    pub include_self: bool,
    pub mode: GcMode,
}

impl Default for GcParams {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 0.3,
            beta: 200.0,
            k: 100,
            auto_beta: false,
            include_self: true,
            mode: GcMode::Full,
        }
    }
}

impl GcParams {
    /// Reported setting for the Wikipedia benchmark.
    pub fn wikipedia() -> Self {
        Self { alpha: 0.3, gamma: 0.3, beta: 900.0, k: 600, ..Self::default() }
    }

    /// Reported setting for the MIRFlickr-25K benchmark.
    pub fn mirflickr() -> Self {
        Self { alpha: 0.01, gamma: 0.3, beta: 4000.0, k: 2000, ..Self::default() }
    }

    /// Reported setting for the NUS-WIDE benchmark.
    pub fn nus_wide() -> Self {
        Self { alpha: 0.1, gamma: 0.3, beta: 4500.0, k: 2000, ..Self::default() }
    }

    /// `gamma` after applying the ablation mode.
    pub fn effective_gamma(&self) -> f64 {
        match self.mode {
            GcMode::Full => self.gamma,
            GcMode::PairwiseOnly => 0.0,
            GcMode::NoPairwise => 1.0,
        }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!("alpha {} not in [0, 1]", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidParameter(format!("gamma {} not in [0, 1]", self.gamma)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!("beta {} must be > 0", self.beta)));
        }
        let pool = if self.include_self { m } else { m.saturating_sub(1) };
        if self.k == 0 || self.k > pool {
            return Err(Error::InvalidParameter(format!(
                "k = {} must lie in [1, {pool}]",
                self.k
            )));
        }
        Ok(())
    }
}

/// Everything derived from the training features.
#[derive(Debug, Clone, PartialEq)]
pub struct GcModel {
    pub dist: Array2<f64>,
    pub pcond: RowSparse,
    pub prob: Array2<f64>,
    pub s_final: Array2<f64>,
    /// The scale actually applied (differs from the configured one in auto mode).
    pub beta: f64,
}

impl GcModel {
    pub fn build(ds: &PairedDataset, params: &GcParams) -> Result<Self> {
        params.validate(ds.m())?;
        let dist = pairwise_distance(ds, params.alpha)?;
        let pcond = conditional_prob(dist.view(), params.k, params.include_self)?;
        let prob = gc_probability(&pcond);
        let beta = if params.auto_beta {
            auto_beta(prob.view())?
        } else {
            params.beta
        };
        let s_final = gc_final(dist.view(), prob.view(), params.effective_gamma(), beta)?;
        Ok(Self {
            dist,
            pcond,
            prob,
            s_final,
            beta,
        })
    }

    pub fn m(&self) -> usize {
        self.dist.nrows()
    }

    /// The training target restricted to `idx × idx`.
    pub fn batch_target(&self, idx: &[usize]) -> Array2<f64> {
        Array2::from_shape_fn((idx.len(), idx.len()), |(a, b)| self.s_final[[idx[a], idx[b]]])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn cosine_examples() {
        let a = Array1::from(vec![1.0, 2.0, 3.0]);
        assert!((cosine(a.view(), a.view()).unwrap() - 1.0).abs() < 1e-15);
        let x = array![1.0, 0.0];
        let y = array![0.0, 1.0];
        assert_eq!(cosine(x.view(), y.view()).unwrap(), 0.0);
        let z = array![1.0, 1.0];
        assert!((cosine(x.view(), z.view()).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_vector_and_mismatch() {
        let z = array![0.0, 0.0];
        let x = array![1.0, 3.0];
        assert_eq!(cosine(z.view(), x.view()).unwrap(), 0.0);
        let short = array![1.0];
        assert!(matches!(
            cosine(x.view(), short.view()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn cosine_matrix_symmetry_and_diagonal() {
        let x = array![[1.0, 2.0, 0.5], [0.0, 1.0, 1.0], [3.0, 0.0, 1.0]];
        let y = array![[1.0, 1.0, 1.0], [0.2, 0.0, 4.0]];
        let c = cosine_matrix(x.view(), x.view()).unwrap();
        for i in 0..3 {
            assert!((c[[i, i]] - 1.0).abs() < 1e-12);
        }
        let xy = cosine_matrix(x.view(), y.view()).unwrap();
        let yx = cosine_matrix(y.view(), x.view()).unwrap();
        assert!(xy.iter().zip(yx.t().iter()).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(cosine_matrix(x.view(), array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn uniform_distances_give_uniform_weights() {
        let dist = Array2::from_elem((6, 6), 0.4);
        let pc = conditional_prob(dist.view(), 4, true).unwrap();
        for i in 0..6 {
            let (cols, vals) = pc.row(i);
            assert_eq!(cols.len(), 4);
            // Equal distances: ties resolve to the smallest indices.
            assert_eq!(cols, &[0, 1, 2, 3]);
            assert!(vals.iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn full_neighborhood_is_row_normalization() {
        let dist = array![[1.0, 0.5, 0.25], [0.5, 1.0, 0.75], [0.25, 0.75, 1.0]];
        let pc = conditional_prob(dist.view(), 3, true).unwrap().to_dense();
        for i in 0..3 {
            let s: f64 = dist.row(i).sum();
            for j in 0..3 {
                assert_eq!(pc[[i, j]], dist[[i, j]] / s);
            }
        }
    }

    #[test]
    fn hand_evaluated_five_node_graph() {
        // Row 0 keeps {0 (1.0), 2 (0.8)}, row 1 keeps {1, 3}, etc.
        let dist = array![
            [1.0, 0.1, 0.8, 0.3, 0.2],
            [0.1, 1.0, 0.2, 0.6, 0.5],
            [0.8, 0.2, 1.0, 0.4, 0.9],
            [0.3, 0.6, 0.4, 1.0, 0.6],
            [0.2, 0.5, 0.9, 0.6, 1.0],
        ];
        let pc = conditional_prob(dist.view(), 2, true).unwrap();
        let expect: [(&[u32], &[f64]); 5] = [
            (&[0, 2], &[1.0 / 1.8, 0.8 / 1.8]),
            (&[1, 3], &[1.0 / 1.6, 0.6 / 1.6]),
            (&[2, 4], &[1.0 / 1.9, 0.9 / 1.9]),
            // 0.6 ties between columns 1 and 4; the lower index wins.
            (&[1, 3], &[0.6 / 1.6, 1.0 / 1.6]),
            (&[2, 4], &[0.9 / 1.9, 1.0 / 1.9]),
        ];
        for (i, (cols, vals)) in expect.iter().enumerate() {
            let (c, v) = pc.row(i);
            assert_eq!(c, *cols, "row {i}");
            for (a, b) in v.iter().zip(vals.iter()) {
                assert!((a - b).abs() < 1e-15, "row {i}");
            }
        }
    }

    #[test]
    fn exclude_self_skips_diagonal() {
        let dist = array![[1.0, 0.5, 0.25], [0.5, 1.0, 0.75], [0.25, 0.75, 1.0]];
        let pc = conditional_prob(dist.view(), 1, false).unwrap();
        assert_eq!(pc.row(0).0, &[1]);
        assert_eq!(pc.row(1).0, &[2]);
        assert_eq!(pc.row(2).0, &[1]);
        assert!(conditional_prob(dist.view(), 3, false).is_err());
    }

    #[test]
    fn isolated_node_is_an_error() {
        let dist = array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            conditional_prob(dist.view(), 2, true),
            Err(Error::IsolatedNode(1))
        ));
    }

    #[test]
    fn k_out_of_range() {
        let dist = Array2::from_elem((3, 3), 1.0);
        assert!(conditional_prob(dist.view(), 0, true).is_err());
        assert!(conditional_prob(dist.view(), 4, true).is_err());
    }

    #[test]
    fn disjoint_and_identical_rows() {
        let pc = RowSparse::from_rows(
            4,
            vec![
                vec![(0, 0.5), (1, 0.5)],
                vec![(2, 0.3), (3, 0.7)],
                vec![(2, 0.3), (3, 0.7)],
                vec![(0, 1.0)],
            ],
        );
        let p = gc_probability(&pc);
        assert_eq!(p[[0, 1]], 0.0);
        assert_eq!(p[[1, 2]], p[[1, 1]]);
        assert!((p[[1, 1]] - (0.09 + 0.49)).abs() < 1e-15);
    }

    #[test]
    fn gc_final_endpoints() {
        let dist = array![[1.0, 0.4], [0.4, 1.0]];
        let prob = array![[0.3, 0.1], [0.1, 0.2]];
        let g0 = gc_final(dist.view(), prob.view(), 0.0, 17.0).unwrap();
        assert_eq!(g0, dist.mapv(|d| 2.0 * d - 1.0));
        let g1 = gc_final(dist.view(), prob.view(), 1.0, 5.0).unwrap();
        assert_eq!(g1, prob.mapv(|p| 2.0 * (5.0 * p) - 1.0));
        assert!(gc_final(dist.view(), prob.view(), 1.5, 5.0).is_err());
        assert!(gc_final(dist.view(), prob.view(), 0.5, 0.0).is_err());
    }

    #[test]
    fn mode_overrides_gamma() {
        let p = GcParams { gamma: 0.7, ..GcParams::default() };
        assert_eq!(p.effective_gamma(), 0.7);
        assert_eq!(GcParams { mode: GcMode::PairwiseOnly, ..p.clone() }.effective_gamma(), 0.0);
        assert_eq!(GcParams { mode: GcMode::NoPairwise, ..p }.effective_gamma(), 1.0);
    }
}
