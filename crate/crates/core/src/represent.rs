//! Pathwise decomposition `Y_t = E^G[ξ] + ∫ H dX − K_t` read off the PDE field.
//!
//! `Y = u(t, X_t)` and `H = ∂_x u` come from field reads, while `K` is
//! accumulated independently from the Hessian as
//! `Σ (G(D²u) − ½ α D²u) Δt` with left-endpoint sums. The residual of the
//! identity is therefore a genuine cross-check.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpde::{g_expectation, Quantity, ValueField};
use crate::qsmc::{conditional_value_on_path, grid_index, stream_paths, ControlFamily, PathBundle};
use crate::rng::{tree_sum, Estimate};

/// `G(γ) − ½ α γ`, arranged so that the sign is exact: for `a̲ ≤ α ≤ ā` the
/// result is never negative.
pub fn k_integrand(gamma: f64, alpha: f64, lo: f64, hi: f64) -> f64 {
    if gamma >= 0.0 {
        0.5 * (hi - alpha) * gamma
    } else {
        0.5 * (lo - alpha) * gamma
    }
}

/// The triple along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct PathDecomposition {
    /// `M + 1` values.
    pub y: Vec<f64>,
    /// `M` left-point values.
    pub h: Vec<f64>,
    /// `M + 1` values, `K_0 = 0`.
    pub k: Vec<f64>,
    /// `∫_0^{t_k} H dX`, `M + 1` values.
    pub int_hdx: Vec<f64>,
    /// Some read left the truncation box.
    pub clamped: bool,
}

fn history_at(field: &ValueField, x: &[f64], m: usize, t: f64) -> Result<Vec<f64>> {
    field
        .payoff()
        .times()
        .iter()
        .take_while(|&&s| s <= t)
        .map(|&s| grid_index(s, m).map(|j| x[j]))
        .collect()
}

/// Decomposes one path `x` (with `M + 1` points) under the per-step control `alpha`.
pub fn decompose_path(field: &ValueField, x: &[f64], alpha: &[f64]) -> Result<PathDecomposition> {
    let m = alpha.len();
    if x.len() != m + 1 {
        return Err(Error::Misaligned(format!("{} points for {m} steps", x.len())));
    }
    let (lo, hi) = (field.band().lo(), field.band().hi());
    let dt = 1.0 / m as f64;
    let mut out = PathDecomposition {
        y: Vec::with_capacity(m + 1),
        h: Vec::with_capacity(m),
        k: Vec::with_capacity(m + 1),
        int_hdx: Vec::with_capacity(m + 1),
        clamped: false,
    };
    let (mut k_acc, mut i_acc) = (0.0, 0.0);
    out.k.push(0.0);
    out.int_hdx.push(0.0);
    for step in 0..=m {
        let t = step as f64 * dt;
        let (y, c) = conditional_value_on_path(field, x, m, t)?;
        out.y.push(y);
        out.clamped |= c;
        if step == m {
            break;
        }
        let hist = history_at(field, x, m, t)?;
        let grad = field.read(t, &hist, x[step], Quantity::Gradient)?;
        let hess = field.read(t, &hist, x[step], Quantity::Hessian)?;
        out.clamped |= grad.clamped | hess.clamped;
        out.h.push(grad.value);
        k_acc += k_integrand(hess.value, alpha[step], lo, hi) * dt;
        i_acc += grad.value * (x[step + 1] - x[step]);
        out.k.push(k_acc);
        out.int_hdx.push(i_acc);
    }
    Ok(out)
}

/// `K_1` alone; cheaper than the full decomposition.
pub fn terminal_k(field: &ValueField, x: &[f64], alpha: &[f64]) -> Result<(f64, bool)> {
    let m = alpha.len();
    let (lo, hi) = (field.band().lo(), field.band().hi());
    let dt = 1.0 / m as f64;
    let mut k = 0.0;
    let mut clamped = false;
    for step in 0..m {
        let t = step as f64 * dt;
        let hist = history_at(field, x, m, t)?;
        let hess = field.read(t, &hist, x[step], Quantity::Hessian)?;
        clamped |= hess.clamped;
        k += k_integrand(hess.value, alpha[step], lo, hi) * dt;
    }
    Ok((k, clamped))
}

/// Sampled `(Y, H, K)` over a bundle.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub label: String,
    pub steps: usize,
    pub paths: Vec<PathDecomposition>,
}

/// Extracts the decomposition along every path of the bundle.
pub fn extract(field: &ValueField, bundle: &PathBundle) -> Result<Decomposition> {
    let paths = (0..bundle.n_paths)
        .into_par_iter()
        .map(|i| decompose_path(field, bundle.path(i), bundle.alpha()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Decomposition {
        label: format!("{:?}", bundle.control().values()),
        steps: bundle.steps,
        paths,
    })
}

impl Decomposition {
    /// Paths kept in aggregates.
    pub fn included(&self) -> impl Iterator<Item = &PathDecomposition> {
        self.paths.iter().filter(|p| !p.clamped)
    }

    pub fn excluded_count(&self) -> usize {
        self.paths.iter().filter(|p| p.clamped).count()
    }

    pub fn exclusion_rate(&self) -> f64 {
        self.excluded_count() as f64 / self.paths.len() as f64
    }

    /// MC mean of `Y_{t_k}` for every grid time (included paths only).
    pub fn y_means(&self) -> Vec<Estimate> {
        (0..=self.steps)
            .map(|k| {
                let ys: Vec<f64> = self.included().map(|p| p.y[k]).collect();
                Estimate::from_samples(&ys)
            })
            .collect()
    }

    /// Writes `path_id, t, Y, H, K, int_HdX, residual`; `H` is blank at `t = 1`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "path_id,t,Y,H,K,int_HdX,residual")?;
        let dt = 1.0 / self.steps as f64;
        for (i, p) in self.paths.iter().enumerate() {
            for k in 0..=self.steps {
                let h = p.h.get(k).map(|h| format!("{h:?}")).unwrap_or_default();
                writeln!(
                    out,
                    "{i},{:?},{:?},{h},{:?},{:?},{:?}",
                    k as f64 * dt,
                    p.y[k],
                    p.k[k],
                    p.int_hdx[k],
                    defect(p, k)
                )?;
            }
        }
        Ok(())
    }
}

fn defect(p: &PathDecomposition, k: usize) -> f64 {
    p.y[k] - p.y[0] - p.int_hdx[k] + p.k[k]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualSummary {
    /// `sup_t |Y_t − Y_0 − ∫H dX + K_t|` per path; `None` for excluded paths.
    pub per_path: Vec<Option<f64>>,
    pub rms: f64,
    pub max: f64,
    pub excluded: usize,
}

/// Pathwise defect of the representation identity.
pub fn residual(dec: &Decomposition) -> ResidualSummary {
    let per_path: Vec<Option<f64>> = dec
        .paths
        .iter()
        .map(|p| {
            (!p.clamped).then(|| (0..=dec.steps).map(|k| defect(p, k).abs()).fold(0.0, f64::max))
        })
        .collect();
    let kept: Vec<f64> = per_path.iter().flatten().copied().collect();
    let sq: Vec<f64> = kept.iter().map(|r| r * r).collect();
    ResidualSummary {
        rms: if kept.is_empty() {
            f64::NAN
        } else {
            (tree_sum(&sq) / kept.len() as f64).sqrt()
        },
        max: kept.iter().fold(0.0, |m, &r| m.max(r)),
        excluded: dec.excluded_count(),
        per_path,
    }
}

/// Most negative increment of `K` over included paths (`0` if `K` never decreases).
pub fn monotonicity(dec: &Decomposition) -> f64 {
    dec.included()
        .flat_map(|p| p.k.windows(2).map(|w| w[1] - w[0]))
        .fold(0.0, f64::min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub label: String,
    /// MC estimate of `E^P[−K_1]`.
    pub minus_k: Estimate,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmartingaleGap {
    pub sup: f64,
    pub std_err: f64,
    pub argmax: usize,
    pub argmax_label: String,
    pub table: Vec<GapRow>,
}

/// `sup_P E^P[−K_1]` over the family; near zero certifies that `−K` is a G-martingale.
pub fn gmartingale_gap(
    field: &ValueField,
    family: &ControlFamily,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<GmartingaleGap> {
    let mut table = Vec::with_capacity(family.len());
    for (control, label) in family.controls().iter().zip(family.labels()) {
        let alpha = control.on_grid(m);
        let rows = stream_paths(n, m, seed, &alpha, |x| terminal_k(field, x, &alpha))?;
        let kept: Vec<f64> = rows.iter().filter(|r| !r.1).map(|r| -r.0).collect();
        table.push(GapRow {
            label: label.clone(),
            minus_k: Estimate::from_samples(&kept),
            excluded: rows.len() - kept.len(),
        });
    }
    let mut argmax = 0;
    for (i, r) in table.iter().enumerate() {
        if r.minus_k.mean > table[argmax].minus_k.mean {
            argmax = i;
        }
    }
    Ok(GmartingaleGap {
        sup: table[argmax].minus_k.mean,
        std_err: table[argmax].minus_k.std_err,
        argmax,
        argmax_label: table[argmax].label.clone(),
        table,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymmetryEvidence {
    pub symmetric: bool,
    /// `sup |K_t|` over the family and the included paths.
    pub k_max: f64,
    /// `E^G[ξ] + E^G[−ξ]`, zero for symmetric martingales.
    pub mean_gap: f64,
    pub tolerance: f64,
}

/// Classifies `E^G_t[ξ]` as a symmetric G-martingale when `K` vanishes on every path.
pub fn is_symmetric(
    field: &ValueField,
    family: &ControlFamily,
    n: usize,
    m: usize,
    seed: u64,
    tol: f64,
) -> Result<SymmetryEvidence> {
    let mut k_max = 0.0f64;
    for control in family.controls() {
        let alpha = control.on_grid(m);
        // K is non-decreasing, so the terminal value is its supremum.
        let rows = stream_paths(n, m, seed, &alpha, |x| terminal_k(field, x, &alpha))?;
        k_max = rows
            .iter()
            .filter(|r| !r.1)
            .fold(k_max, |acc, r| acc.max(r.0.abs()));
    }
    let neg = g_expectation(&field.payoff().negated(), field.band(), field.grid())?;
    Ok(SymmetryEvidence {
        symmetric: k_max <= tol,
        k_max,
        mean_gap: field.initial_value() + neg,
        tolerance: tol,
    })
}
