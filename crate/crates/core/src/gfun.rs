//! The volatility-uncertainty nonlinearity
//!
//! ```text
//! G(γ) = ½ sup { tr(γ a) : a_lower ≤ a ≤ a_upper }
//! ```
//!
//! together with its ε-mollified version `G^ε` (scalar bands only) and the
//! Legendre transform `L^ε` of the mollified function.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported matrix dimension.
pub const MAX_DIM: usize = 3;

/// Relative slack used when testing the positive-semidefinite order.
const PSD_TOL: f64 = 1e-12;

/// A symmetric `d × d` matrix, `1 ≤ d ≤ 3`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMat {
    dim: usize,
    entries: Vec<f64>,
}

impl SymMat {
    /// Builds a matrix from row-major entries. Symmetry is checked to exact equality.
    pub fn new(dim: usize, entries: Vec<f64>) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::UnsupportedDimension(dim));
        }
        if entries.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: entries.len(),
            });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entries".into()));
        }
        for r in 0..dim {
            for c in (r + 1)..dim {
                if entries[r * dim + c] != entries[c * dim + r] {
                    return Err(Error::NotSymmetric { row: r, col: c });
                }
            }
        }
        Ok(Self { dim, entries })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dim: 1,
            entries: vec![value],
        }
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        let d = values.len();
        let mut entries = vec![0.0; d * d];
        for (i, v) in values.iter().enumerate() {
            entries[i * d + i] = *v;
        }
        Self::new(d, entries)
    }

    /// `c · I_d`.
    pub fn scaled_identity(dim: usize, c: f64) -> Result<Self> {
        Self::diag(&vec![c; dim])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// `tr(self · other)`.
    pub fn trace_product(&self, other: &SymMat) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn scale(&self, c: f64) -> SymMat {
        SymMat {
            dim: self.dim,
            entries: self.entries.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add(&self, other: &SymMat) -> Result<SymMat> {
        self.check_dim(other)?;
        Ok(SymMat {
            dim: self.dim,
            entries: self
                .entries
                .iter()
                .zip(&other.entries)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &SymMat) -> Result<SymMat> {
        self.add(&other.scale(-1.0))
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.to_matrix())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(|a, b| a.total_cmp(b));
        ev
    }

    /// True when `self` is a scalar multiple of the identity.
    pub fn is_scaled_identity(&self) -> bool {
        let c = self.get(0, 0);
        (0..self.dim).all(|r| {
            (0..self.dim).all(|col| {
                let want = if r == col { c } else { 0.0 };
                self.get(r, col) == want
            })
        })
    }

    /// Positive semidefinite up to a relative slack.
    pub fn is_psd(&self) -> bool {
        let scale = self.max_abs().max(1.0);
        self.eigenvalues()[0] >= -PSD_TOL * scale
    }

    fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_dim(&self, other: &SymMat) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        Ok(())
    }

    pub(crate) fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.entries)
    }

    /// Re-symmetrizes a numerically produced matrix.
    pub(crate) fn from_matrix(m: &DMatrix<f64>) -> SymMat {
        let d = m.nrows();
        let mut entries = vec![0.0; d * d];
        for r in 0..d {
            for c in 0..d {
                entries[r * d + c] = 0.5 * (m[(r, c)] + m[(c, r)]);
            }
        }
        SymMat { dim: d, entries }
    }
}

/// Applies `f` to the spectrum of a symmetric matrix.
fn spectral_map(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mapped = eig.eigenvalues.map(f);
    &eig.eigenvectors * DMatrix::from_diagonal(&mapped) * eig.eigenvectors.transpose()
}

/// The matrix interval `[a_lower, a_upper]` in the positive-semidefinite order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolBand {
    lower: SymMat,
    upper: SymMat,
    isotropic: bool,
}

impl VolBand {
    /// Requires `0 ≤ a_lower ≤ a_upper` and `a_upper` positive definite.
    pub fn new(lower: SymMat, upper: SymMat) -> Result<Self> {
        lower.check_dim(&upper)?;
        if !lower.is_psd() {
            return Err(Error::InvalidBand("a_lower is not positive semidefinite".into()));
        }
        if !upper.sub(&lower)?.is_psd() {
            return Err(Error::InvalidBand("a_lower ≤ a_upper fails".into()));
        }
        if upper.eigenvalues()[0] <= 0.0 {
            return Err(Error::InvalidBand("a_upper is not positive definite".into()));
        }
        let isotropic = lower.is_scaled_identity() && upper.is_scaled_identity();
        Ok(Self {
            lower,
            upper,
            isotropic,
        })
    }

    /// Scalar band `[lo, hi]` (d = 1).
    pub fn scalar(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::NonFinite("band bounds".into()));
        }
        if lo < 0.0 || hi <= 0.0 || lo > hi {
            return Err(Error::InvalidBand(format!(
                "need 0 ≤ a_lower ≤ a_upper and a_upper > 0, got [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            lower: SymMat::scalar(lo),
            upper: SymMat::scalar(hi),
            isotropic: true,
        })
    }

    /// `[lo · I_d, hi · I_d]`.
    pub fn isotropic(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(
            SymMat::scaled_identity(dim, lo)?,
            SymMat::scaled_identity(dim, hi)?,
        )
    }

    pub fn dim(&self) -> usize {
        self.lower.dim
    }

    pub fn lower(&self) -> &SymMat {
        &self.lower
    }

    pub fn upper(&self) -> &SymMat {
        &self.upper
    }

    pub fn is_isotropic(&self) -> bool {
        self.isotropic
    }

    /// Lower bound as a scalar; only meaningful for isotropic bands.
    pub fn lo(&self) -> f64 {
        self.lower.get(0, 0)
    }

    /// Upper bound as a scalar; only meaningful for isotropic bands.
    pub fn hi(&self) -> f64 {
        self.upper.get(0, 0)
    }

    /// True if `a` lies in the band.
    pub fn contains(&self, a: &SymMat) -> Result<bool> {
        Ok(a.sub(&self.lower)?.is_psd() && self.upper.sub(a)?.is_psd())
    }
}

/// Scalar nonlinearity `½(ā γ⁺ − a̲ γ⁻)`.
#[inline]
pub fn g_scalar(gamma: f64, lo: f64, hi: f64) -> f64 {
    if gamma >= 0.0 {
        0.5 * hi * gamma
    } else {
        0.5 * lo * gamma
    }
}

/// Evaluates `G(γ)` for the given band.
///
/// Scalar and isotropic bands use the eigenvalue formula. A general interval
/// is reduced by the congruence `a = a_lower + D^{1/2} Y D^{1/2}`, `0 ≤ Y ≤ I`,
/// with `D = a_upper − a_lower`, which gives
/// `G(γ) = ½ (tr(γ a_lower) + Σ eig⁺(D^{1/2} γ D^{1/2}))`.
/// [`eval_g_iterative`] computes the same supremum by projected ascent.
pub fn eval_g(gamma: &SymMat, band: &VolBand) -> Result<f64> {
    gamma.check_dim(&band.lower)?;
    if band.dim() == 1 {
        return Ok(g_scalar(gamma.get(0, 0), band.lo(), band.hi()));
    }
    if band.isotropic {
        let (pos, neg) = gamma
            .eigenvalues()
            .into_iter()
            .fold((0.0, 0.0), |(p, n), l| (p + l.max(0.0), n + (-l).max(0.0)));
        return Ok(0.5 * (band.hi() * pos - band.lo() * neg));
    }
    let spread = band.upper.sub(&band.lower)?.to_matrix();
    let root = spectral_map(&spread, |l| l.max(0.0).sqrt());
    let congruent = SymMat::from_matrix(&(&root * gamma.to_matrix() * &root));
    let pos: f64 = congruent.eigenvalues().into_iter().map(|l| l.max(0.0)).sum();
    Ok(0.5 * (gamma.trace_product(&band.lower) + pos))
}

/// Settings for [`eval_g_iterative`].
#[derive(Debug, Clone, Copy)]
pub struct AscentOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AscentOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
        }
    }
}

/// Outcome of the iterative evaluation.
#[derive(Debug, Clone)]
pub struct AscentResult {
    pub value: f64,
    pub maximizer: SymMat,
    pub iterations: usize,
}

/// Evaluates `G(γ)` by projected ascent over the band.
///
/// The projection onto `{a_lower ≤ a} ∩ {a ≤ a_upper}` is computed with
/// Dykstra's alternating scheme, each half-step being an eigenvalue clip.
pub fn eval_g_iterative(
    gamma: &SymMat,
    band: &VolBand,
    opts: AscentOptions,
) -> Result<AscentResult> {
    gamma.check_dim(&band.lower)?;
    let lower = band.lower.to_matrix();
    let upper = band.upper.to_matrix();
    let g = gamma.to_matrix();
    let spread = (&upper - &lower).norm();
    let gnorm = g.norm();
    let mut a = (&lower + &upper) * 0.5;
    if gnorm == 0.0 {
        return Ok(AscentResult {
            value: 0.0,
            maximizer: SymMat::from_matrix(&a),
            iterations: 0,
        });
    }
    let step = 10.0 * spread.max(1e-12) / gnorm;
    let scale = 1.0 + spread;
    let mut achieved = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let next = project_band(&(&a + &g * step), &lower, &upper);
        achieved = (&next - &a).norm() / scale;
        a = next;
        if achieved <= opts.tol {
            let maximizer = SymMat::from_matrix(&a);
            return Ok(AscentResult {
                value: 0.5 * gamma.trace_product(&maximizer),
                maximizer,
                iterations: it,
            });
        }
    }
    Err(Error::NotConverged {
        iterations: opts.max_iter,
        achieved,
    })
}

const DYKSTRA_SWEEPS: usize = 20_000;

fn project_band(x: &DMatrix<f64>, lower: &DMatrix<f64>, upper: &DMatrix<f64>) -> DMatrix<f64> {
    let d = x.nrows();
    let mut y = x.clone();
    let mut p = DMatrix::zeros(d, d);
    let mut q = DMatrix::zeros(d, d);
    for _ in 0..DYKSTRA_SWEEPS {
        // {a ≥ lower}
        let z = &y + &p;
        let a1 = lower + spectral_map(&(&z - lower), |l| l.max(0.0));
        p = &z - &a1;
        // {a ≤ upper}
        let w = &a1 + &q;
        let a2 = upper - spectral_map(&(upper - &w), |l| l.max(0.0));
        q = &w - &a2;
        let change = (&a2 - &y).norm();
        y = a2;
        if change <= 1e-14 * (1.0 + y.norm()) {
            break;
        }
    }
    y
}

/// Default Simpson node count for the mollifier convolution.
pub const DEFAULT_QUADRATURE_NODES: usize = 129;

/// Mollified scalar nonlinearity `G^ε = Ḡ^ε ∗ η_ε`, where `Ḡ^ε` is the
/// nonlinearity of the lifted band `[a_lower ∨ ε, a_upper]` and `η` the
/// standard bump `exp(−1/(1−s²))` on `(−1, 1)`.
#[derive(Debug, Clone)]
pub struct SmoothG {
    band: VolBand,
    epsilon: f64,
    lower_eps: f64,
    cstar: f64,
    /// Quadrature nodes `s_i ∈ [−1, 1]` with normalized weights `w_i η(s_i)`.
    rule: Vec<(f64, f64)>,
}

/// Builds the mollified evaluator for a scalar band.
pub fn mollify(band: &VolBand, epsilon: f64, quadrature_nodes: usize) -> Result<SmoothG> {
    if band.dim() != 1 {
        return Err(Error::UnsupportedDimension(band.dim()));
    }
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::EpsilonOutOfRange(epsilon));
    }
    if quadrature_nodes < 3 || quadrature_nodes % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "Simpson rule needs an odd node count ≥ 3, got {quadrature_nodes}"
        )));
    }
    let intervals = quadrature_nodes - 1;
    let h = 2.0 / intervals as f64;
    let mut rule: Vec<(f64, f64)> = (0..quadrature_nodes)
        .map(|i| {
            let s = -1.0 + i as f64 * h;
            let simpson = match i {
                0 => 1.0,
                _ if i == intervals => 1.0,
                _ if i % 2 == 1 => 4.0,
                _ => 2.0,
            };
            (s, simpson * bump(s))
        })
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let total: f64 = rule.iter().map(|(_, w)| w).sum();
    for (_, w) in rule.iter_mut() {
        *w /= total;
    }
    let mut g = SmoothG {
        band: band.clone(),
        epsilon,
        lower_eps: band.lo().max(epsilon),
        cstar: 0.0,
        rule,
    };
    // The gap G^ε − Ḡ^ε peaks at the kink γ = 0.
    g.cstar = g.excess(0.0) / epsilon;
    Ok(g)
}

fn bump(s: f64) -> f64 {
    let r = 1.0 - s * s;
    if r <= 0.0 {
        0.0
    } else {
        (-1.0 / r).exp()
    }
}

impl SmoothG {
    pub fn band(&self) -> &VolBand {
        &self.band
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// `a_lower ∨ ε`.
    pub fn lower_eps(&self) -> f64 {
        self.lower_eps
    }

    pub fn upper(&self) -> f64 {
        self.band.hi()
    }

    /// Sandwich constant: `0 ≤ G^ε − Ḡ^ε ≤ C* ε`.
    pub fn cstar(&self) -> f64 {
        self.cstar
    }

    pub fn quadrature_nodes(&self) -> usize {
        self.rule.len() + 2
    }

    /// The lifted-band nonlinearity `Ḡ^ε`.
    pub fn bar(&self, gamma: f64) -> f64 {
        g_scalar(gamma, self.lower_eps, self.band.hi())
    }

    /// `G^ε(γ) − Ḡ^ε(γ)`, computed directly as the mollified Bregman gap of
    /// the convex `Ḡ^ε`, so it is non-negative by construction.
    pub fn excess(&self, gamma: f64) -> f64 {
        let base = self.bar(gamma);
        let slope = if gamma >= 0.0 {
            0.5 * self.band.hi()
        } else {
            0.5 * self.lower_eps
        };
        self.rule
            .iter()
            .map(|&(s, w)| {
                let shift = self.epsilon * s;
                w * (self.bar(gamma + shift) - base - slope * shift).max(0.0)
            })
            .sum()
    }

    /// `G^ε(γ)`.
    pub fn eval(&self, gamma: f64) -> f64 {
        self.bar(gamma) + self.excess(gamma)
    }

    /// `½ a γ − G^ε(γ)` arranged so that its sign is exact for `a` in the lifted band.
    fn conjugate_objective(&self, a: f64, gamma: f64) -> f64 {
        let linear = if gamma >= 0.0 {
            0.5 * (a - self.band.hi()) * gamma
        } else {
            0.5 * (a - self.lower_eps) * gamma
        };
        linear - self.excess(gamma)
    }
}

/// Default truncation of the γ-search in [`legendre`].
pub fn default_gamma_truncation(a: f64) -> f64 {
    100.0 * (1.0 + a.abs())
}

/// Legendre transform `L^ε(a) = sup_γ {½ a γ − G^ε(γ)}` over `γ ∈ [−Γ, Γ]`.
///
/// Returns `f64::INFINITY` when `a` lies outside `[a_lower ∨ ε, a_upper]`.
/// The objective is concave, so a coarse scan over `gamma_nodes` points is
/// followed by golden-section refinement around the best node.
pub fn legendre(g: &SmoothG, a: f64, gamma_truncation: f64, gamma_nodes: usize) -> Result<f64> {
    if !(gamma_truncation > 0.0) {
        return Err(Error::InvalidArgument("gamma truncation must be positive".into()));
    }
    if gamma_nodes < 3 {
        return Err(Error::InvalidArgument("need at least 3 gamma nodes".into()));
    }
    if !(a >= g.lower_eps && a <= g.band.hi()) {
        return Ok(f64::INFINITY);
    }
    let h = 2.0 * gamma_truncation / (gamma_nodes - 1) as f64;
    let node = |i: usize| -gamma_truncation + i as f64 * h;
    let f = |gamma: f64| g.conjugate_objective(a, gamma);
    let (best_i, mut best) = (0..gamma_nodes)
        .map(|i| (i, f(node(i))))
        .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
    best = best.max(f(0.0));
    let (mut lo, mut hi) = (
        node(best_i.saturating_sub(1)),
        node((best_i + 1).min(gamma_nodes - 1)),
    );
    // The kink region [−ε, ε] holds the interior maximizer; refine there too.
    for (l, r) in [(lo, hi), (-g.epsilon, g.epsilon)] {
        lo = l;
        hi = r;
        let ratio = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = hi - ratio * (hi - lo);
        let mut x2 = lo + ratio * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..200 {
            if hi - lo <= 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
                break;
            }
            if f1 < f2 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + ratio * (hi - lo);
                f2 = f(x2);
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - ratio * (hi - lo);
                f1 = f(x1);
            }
        }
        best = best.max(f1).max(f2);
    }
    Ok(best)
}

/// Largest gap `G^ε(γ) − Ḡ^ε(γ)` over a γ-grid.
pub fn sandwich_check(g: &SmoothG, gamma_grid: &[f64]) -> Result<f64> {
    if gamma_grid.is_empty() {
        return Err(Error::InvalidArgument("empty gamma grid".into()));
    }
    Ok(gamma_grid
        .iter()
        .map(|&gm| g.excess(gm))
        .fold(f64::NEG_INFINITY, f64::max))
}
