//! Similarity-preserving losses over a batch of relaxed codes.
//!
//! For a batch with image codes `H_I` and text codes `H_T` (both `n × d`),
//! four cosine matrices are formed: `C_II`, `C_TT`, `C_IT` and
//! `C_TI = C_ITᵀ`. The objective is
//!
//! ```text
//! L = w_c * L_c + λ1 * L_g + λ2 * L_i
//! L_g = Σ_{M ∈ {C_II, C_IT, C_TI, C_TT}} ‖M - S‖_F
//! L_c = ‖diag(C_IT) - 1.5‖_2
//! L_i = Σ over the 6 unordered pairs (A, B) of the four matrices of ‖A - B‖_F
//! ```
//!
//! where `S` is the batch slice of the graph-coherence target and `w_c` is 1
//! except in loss-subset ablations. All arithmetic is `f64`.
//!
//! Gradients are derived by hand: each loss term contributes `∂L/∂M` for the
//! matrices it touches, those are pulled back through `M = X̂ Ŷᵀ` onto the
//! normalized codes, and then through row normalization
//! `∂L/∂x = (g - x̂ (x̂ᵀ g)) / ‖x‖`.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which operands receive gradients; the other is treated as a constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMask {
    Both,
    ImgOnly,
    TxtOnly,
}

impl GradMask {
    fn img(self) -> bool {
        matches!(self, GradMask::Both | GradMask::ImgOnly)
    }

    fn txt(self) -> bool {
        matches!(self, GradMask::Both | GradMask::TxtOnly)
    }
}

/// Norm used for the `L_g` and `L_i` terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    #[default]
    Frobenius,
    Squared,
}

/// Form of the coexistence term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoexistForm {
    /// `‖diag(C_IT) - t‖_2` over the diagonal entries.
    #[default]
    Elementwise,
    /// `|Σ_i (C_IT[i, i] - t)|`.
    Trace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Weight of `L_c`; 1 in the full objective.
    pub coexist_weight: f64,
    pub coexist_target: f64,
    /// Floor on norms used as gradient denominators.
    pub eps: f64,
    pub norm: NormMode,
    pub coexist_form: CoexistForm,
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            coexist_weight: 1.0,
            coexist_target: 1.5,
            eps: 1e-12,
            norm: NormMode::Frobenius,
            coexist_form: CoexistForm::Elementwise,
        }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("coexist_weight", self.coexist_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} = {v} must be >= 0")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::InvalidParameter("eps must be > 0".into()));
        }
        if !self.coexist_target.is_finite() {
            return Err(Error::InvalidParameter("coexist_target must be finite".into()));
        }
        Ok(())
    }
}

/// The four batch similarity matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrices {
    pub ii: Array2<f64>,
    pub tt: Array2<f64>,
    pub it: Array2<f64>,
    pub ti: Array2<f64>,
}

impl SimMatrices {
    /// In the order `[C_II, C_TT, C_IT, C_TI]`.
    pub fn all(&self) -> [&Array2<f64>; 4] {
        [&self.ii, &self.tt, &self.it, &self.ti]
    }
}

struct Normalized {
    unit: Array2<f64>,
    norms: Vec<f64>,
}

fn normalize(h: ArrayView2<f64>, what: &'static str, eps: f64) -> Result<Normalized> {
    let mut unit = h.to_owned();
    let mut norms = Vec::with_capacity(h.nrows());
    for (row, mut r) in unit.rows_mut().into_iter().enumerate() {
        let n = r.dot(&r).sqrt();
        if !n.is_finite() {
            return Err(Error::NonFinite(format!("{what} row {row}")));
        }
        if n < eps {
            return Err(Error::ZeroRow { what, row });
        }
        r.mapv_inplace(|v| v / n);
        norms.push(n);
    }
    Ok(Normalized { unit, norms })
}

fn check_pair(h_img: &ArrayView2<f64>, h_txt: &ArrayView2<f64>) -> Result<()> {
    if h_img.dim() != h_txt.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image codes {:?} vs text codes {:?}",
            h_img.dim(),
            h_txt.dim()
        )));
    }
    if h_img.nrows() == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    Ok(())
}

fn build(a: &Array2<f64>, b: &Array2<f64>) -> SimMatrices {
    let it = a.dot(&b.t());
    SimMatrices {
        ii: a.dot(&a.t()),
        tt: b.dot(&b.t()),
        ti: it.t().to_owned(),
        it,
    }
}

/// Cosine similarity matrices of two code sets. Zero rows are an error.
pub fn sim_matrices(h_img: ArrayView2<f64>, h_txt: ArrayView2<f64>) -> Result<SimMatrices> {
    check_pair(&h_img, &h_txt)?;
    let a = normalize(h_img, "image codes", 1e-12)?;
    let b = normalize(h_txt, "text codes", 1e-12)?;
    Ok(build(&a.unit, &b.unit))
}

fn frobenius(x: &Array2<f64>) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Value of a norm term and the factor that maps the difference matrix to
/// its gradient (`grad = factor * diff`).
fn norm_term(diff: &Array2<f64>, mode: NormMode, eps: f64) -> (f64, f64, f64) {
    let f = frobenius(diff);
    match mode {
        NormMode::Frobenius => (f, 1.0 / f.max(eps), f),
        NormMode::Squared => (f * f, 2.0, f),
    }
}

/// `Σ_M ‖M - S‖_F` over the four matrices.
pub fn loss_g(mats: &SimMatrices, s: ArrayView2<f64>) -> f64 {
    mats.all().iter().map(|m| frobenius(&(*m - &s))).sum()
}

/// `‖diag(C_IT) - target‖_2`.
pub fn loss_c(c_it: ArrayView2<f64>, target: f64) -> f64 {
    c_it.diag().iter().map(|d| (d - target).powi(2)).sum::<f64>().sqrt()
}

/// `Σ ‖A - B‖_F` over the six unordered pairs of distinct matrices.
pub fn loss_i(mats: &SimMatrices) -> f64 {
    let all = mats.all();
    let mut total = 0.0;
    for a in 0..4 {
        for b in (a + 1)..4 {
            total += frobenius(&(all[a] - all[b]));
        }
    }
    total
}

#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_g: f64,
    pub l_i: f64,
    /// `coexist_weight * l_c + lambda1 * l_g + lambda2 * l_i`.
    pub total: f64,
    pub grad_hi: Array2<f64>,
    pub grad_ht: Array2<f64>,
    /// Smallest Frobenius norm among the `L_g` and `L_i` terms; gradients
    /// are not smooth where this approaches zero.
    pub min_term_norm: f64,
}

/// Loss values and analytic gradients with respect to the unmasked operand(s).
pub fn total_loss_and_grads(
    h_img: ArrayView2<f64>,
    h_txt: ArrayView2<f64>,
    s: ArrayView2<f64>,
    params: &LossParams,
    mask: GradMask,
) -> Result<LossBreakdown> {
    check_pair(&h_img, &h_txt)?;
    let n = h_img.nrows();
    if s.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "target {:?} for batch of {n}",
            s.dim()
        )));
    }
    let a = normalize(h_img, "image codes", params.eps)?;
    let b = normalize(h_txt, "text codes", params.eps)?;
    let mats = build(&a.unit, &b.unit);

    // Gradients with respect to [C_II, C_TT, C_IT, C_TI].
    let mut g: [Array2<f64>; 4] = std::array::from_fn(|_| Array2::zeros((n, n)));
    let all = mats.all();
    let mut min_term_norm = f64::INFINITY;

    let mut l_g = 0.0;
    for (k, m) in all.iter().enumerate() {
        let diff = *m - &s;
        let (value, factor, f) = norm_term(&diff, params.norm, params.eps);
        l_g += value;
        min_term_norm = min_term_norm.min(f);
        g[k].scaled_add(params.lambda1 * factor, &diff);
    }

    let mut l_i = 0.0;
    for p in 0..4 {
        for q in (p + 1)..4 {
            let diff = all[p] - all[q];
            let (value, factor, f) = norm_term(&diff, params.norm, params.eps);
            l_i += value;
            min_term_norm = min_term_norm.min(f);
            g[p].scaled_add(params.lambda2 * factor, &diff);
            g[q].scaled_add(-params.lambda2 * factor, &diff);
        }
    }

    let dev: Vec<f64> = mats.it.diag().iter().map(|d| d - params.coexist_target).collect();
    let l_c = match params.coexist_form {
        CoexistForm::Elementwise => {
            let norm = dev.iter().map(|d| d * d).sum::<f64>().sqrt();
            let factor = params.coexist_weight / norm.max(params.eps);
            for (i, d) in dev.iter().enumerate() {
                g[2][[i, i]] += factor * d;
            }
            norm
        }
        CoexistForm::Trace => {
            let sum: f64 = dev.iter().sum();
            let sign = if sum > 0.0 {
                1.0
            } else if sum < 0.0 {
                -1.0
            } else {
                0.0
            };
            for i in 0..n {
                g[2][[i, i]] += params.coexist_weight * sign;
            }
            sum.abs()
        }
    };

    let total = params.coexist_weight * l_c + params.lambda1 * l_g + params.lambda2 * l_i;

    let [g_ii, g_tt, g_it, g_ti] = g;
    let grad_hi = if mask.img() {
        // ∂/∂Â = (G_II + G_IIᵀ) Â + G_IT B̂ + G_TIᵀ B̂
        let mut gu = (&g_ii + &g_ii.t()).dot(&a.unit);
        gu += &(&g_it + &g_ti.t()).dot(&b.unit);
        through_normalization(gu, &a)
    } else {
        Array2::zeros(h_img.raw_dim())
    };
    let grad_ht = if mask.txt() {
        // ∂/∂B̂ = (G_TT + G_TTᵀ) B̂ + G_ITᵀ Â + G_TI Â
        let mut gu = (&g_tt + &g_tt.t()).dot(&b.unit);
        gu += &(&g_it.t() + &g_ti).dot(&a.unit);
        through_normalization(gu, &b)
    } else {
        Array2::zeros(h_txt.raw_dim())
    };

    Ok(LossBreakdown {
        l_c,
        l_g,
        l_i,
        total,
        grad_hi,
        grad_ht,
        min_term_norm,
    })
}

fn through_normalization(mut g_unit: Array2<f64>, x: &Normalized) -> Array2<f64> {
    for ((mut g, u), &norm) in g_unit
        .axis_iter_mut(Axis(0))
        .zip(x.unit.axis_iter(Axis(0)))
        .zip(&x.norms)
    {
        let proj = g.dot(&u);
        Zip::from(&mut g).and(&u).for_each(|gi, &ui| *gi = (*gi - ui * proj) / norm);
    }
    g_unit
}

/// `‖H - sign(H)‖_F` and its gradient, with `sign(H)` held constant.
pub fn value_gap(h: ArrayView2<f64>, eps: f64) -> (f64, Array2<f64>) {
    let diff = h.mapv(|v| v - if v >= 0.0 { 1.0 } else { -1.0 });
    let f = frobenius(&diff);
    let grad = &diff / f.max(eps);
    (f, grad)
}
