//! Empirical checks of the norm inequalities.
//!
//! Every check returns an [`InequalityReport`] with `pass ⇔ left ≤ right + slack`.
//! The slack is a grid tolerance plus two Monte Carlo standard errors and is
//! printed in every report. Sides that are independent quantities are
//! estimated on distinct sub-seeds so that shared noise cannot produce a
//! spurious pass.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfun::VolBand;
use crate::gpde::{conditional_expectation, g_expectation_of, SpaceTimeGrid, ValueField};
use crate::payoff::PayoffSpec;
use crate::qsmc::{
    lp_norm, monitored, power_mean_estimate, stream_paths, ControlFamily, McSettings, NormEstimate,
};
use crate::represent::decompose_path;
use crate::rng::{sub_seed, Estimate};

/// Constant of the a-priori estimate `E[K_1²] ≤ 54 E[sup |Y|²]`.
pub const APRIORI_CONSTANT: f64 = 54.0;

/// Number of grid times used for the inner supremum of `L^p_P` norms.
pub const DEFAULT_SUP_POINTS: usize = 16;

/// `C_p = (p / (p − 2))^{1/2}`.
pub fn doob_constant(p: f64) -> f64 {
    (p / (p - 2.0)).sqrt()
}

/// Configuration a report can be reproduced from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub seed: u64,
    pub n_paths: usize,
    pub steps: usize,
    pub family_size: usize,
    pub nx: Option<usize>,
    pub x_max: Option<f64>,
}

impl Fingerprint {
    pub fn new(mc: &McSettings, family: &ControlFamily, grid: Option<&SpaceTimeGrid>) -> Self {
        Self {
            seed: mc.seed,
            n_paths: mc.n_paths,
            steps: mc.steps,
            family_size: family.len(),
            nx: grid.map(|g| g.nx),
            x_max: grid.map(|g| g.x_max),
        }
    }
}

/// Grid tolerance and the multiple of the standard error added to it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Slack {
    pub grid_tol: f64,
    pub se_mult: f64,
}

impl Default for Slack {
    fn default() -> Self {
        Self {
            grid_tol: 1e-2,
            se_mult: 2.0,
        }
    }
}

impl Slack {
    pub fn strict() -> Self {
        Self {
            grid_tol: 0.0,
            se_mult: 0.0,
        }
    }

    /// `grid_tol + se_mult · √(Σ se²)`.
    pub fn total(&self, ses: &[f64]) -> f64 {
        self.grid_tol + self.se_mult * ses.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub name: String,
    pub left: f64,
    pub right: f64,
    pub constant: Option<f64>,
    pub slack: f64,
    /// `right + slack − left`.
    pub margin: f64,
    pub pass: bool,
    pub std_errors: Vec<f64>,
    pub details: BTreeMap<String, f64>,
    pub fingerprint: Option<Fingerprint>,
}

impl InequalityReport {
    pub fn new(name: &str, left: f64, right: f64, constant: Option<f64>, slack: f64, std_errors: Vec<f64>) -> Self {
        let margin = right + slack - left;
        Self {
            name: name.to_string(),
            left,
            right,
            constant,
            slack,
            margin,
            pass: left <= right + slack,
            std_errors,
            details: BTreeMap::new(),
            fingerprint: None,
        }
    }

    pub fn with_detail(mut self, key: &str, value: f64) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }

    pub fn with_fingerprint(mut self, fp: Fingerprint) -> Self {
        self.fingerprint = Some(fp);
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reports serialise")
    }
}

/// Fixed-width table of reports.
pub fn render_table(reports: &[InequalityReport]) -> String {
    let w = reports.iter().map(|r| r.name.chars().count()).max().unwrap_or(0).max(5);
    let mut s = format!(
        "{:<w$} {:>12} {:>12} {:>10} {:>12} {:>6}\n",
        "check", "left", "right", "slack", "margin", "pass"
    );
    for r in reports {
        let _ = writeln!(
            s,
            "{:<w$} {:>12.6} {:>12.6} {:>10.2e} {:>12.6} {:>6}",
            r.name,
            r.left,
            r.right,
            r.slack,
            r.margin,
            if r.pass { "yes" } else { "NO" }
        );
    }
    s
}

/// Integrand for the BDG check.
#[derive(Debug, Clone, Copy)]
pub enum HSpec {
    Constant(f64),
    /// `1_{t < s}`.
    Before(f64),
    /// Bounded `f(t, X_t)`.
    Function(&'static str, fn(f64, f64) -> f64),
}

impl HSpec {
    pub fn eval(&self, t: f64, x: f64) -> f64 {
        match *self {
            HSpec::Constant(c) => c,
            HSpec::Before(s) => {
                if t < s {
                    1.0
                } else {
                    0.0
                }
            }
            HSpec::Function(_, f) => f(t, x),
        }
    }

    pub fn label(&self) -> String {
        match self {
            HSpec::Constant(c) => format!("H={c}"),
            HSpec::Before(s) => format!("H=1[t<{s}]"),
            HSpec::Function(name, _) => format!("H={name}"),
        }
    }
}

fn family_max(rows: impl IntoIterator<Item = (f64, f64)>) -> (f64, f64) {
    rows.into_iter()
        .fold((f64::NEG_INFINITY, 0.0), |best, r| if r.0 > best.0 { r } else { best })
}

/// `‖H‖_{H²} ≤ ‖∫H dX‖_{S²} ≤ 2 ‖H‖_{H²}`.
pub fn bdg_check(h: HSpec, family: &ControlFamily, mc: McSettings, slack: Slack) -> Result<Vec<InequalityReport>> {
    let m = mc.steps;
    let dt = 1.0 / m as f64;
    let seed_h = sub_seed(mc.seed, "bdg/h");
    let seed_i = sub_seed(mc.seed, "bdg/integral");
    let mut h_rows = Vec::new();
    let mut i_rows = Vec::new();
    for control in family.controls() {
        let alpha = control.on_grid(m);
        let qv = stream_paths(mc.n_paths, m, seed_h, &alpha, |x| {
            let s: f64 = (0..m).map(|k| alpha[k] * h.eval(k as f64 * dt, x[k]).powi(2) * dt).sum();
            Ok(s.sqrt())
        })?;
        h_rows.push(power_mean_estimate(&qv, 2.0));
        let sups = stream_paths(mc.n_paths, m, seed_i, &alpha, |x| {
            let mut acc = 0.0;
            let mut sup = 0.0f64;
            for k in 0..m {
                acc += h.eval(k as f64 * dt, x[k]) * (x[k + 1] - x[k]);
                sup = sup.max(acc.abs());
            }
            Ok(sup)
        })?;
        i_rows.push(power_mean_estimate(&sups, 2.0));
    }
    let (hn, hse) = family_max(h_rows);
    let (inorm, ise) = family_max(i_rows);
    let fp = Fingerprint::new(&mc, family, None);
    let label = h.label();
    Ok(vec![
        InequalityReport::new(&format!("bdg-lower {label}"), hn, inorm, Some(1.0), slack.total(&[hse, ise]), vec![hse, ise])
            .with_fingerprint(fp.clone()),
        InequalityReport::new(
            &format!("bdg-upper {label}"),
            inorm,
            2.0 * hn,
            Some(2.0),
            slack.total(&[ise, 2.0 * hse]),
            vec![ise, hse],
        )
        .with_fingerprint(fp),
    ])
}

/// `E^P[K_1²] ≤ 54 E^P[sup_t |Y_t|²]` for every control; the report carries the worst control.
pub fn apriori_check(field: &ValueField, family: &ControlFamily, mc: McSettings) -> Result<InequalityReport> {
    let m = mc.steps;
    let dt = 1.0 / m as f64;
    let mut worst: Option<(f64, f64, f64)> = None;
    let mut excluded = 0;
    let (mut hn, mut kn, mut yn) = (0.0f64, 0.0f64, 0.0f64);
    for control in family.controls() {
        let alpha = control.on_grid(m);
        let rows = stream_paths(mc.n_paths, m, mc.seed, &alpha, |x| {
            let d = decompose_path(field, x, &alpha)?;
            let k1 = *d.k.last().unwrap();
            let sup_y = d.y.iter().fold(0.0f64, |s, y| s.max(y.abs()));
            let qv: f64 = d.h.iter().zip(&alpha).map(|(h, a)| a * h * h * dt).sum();
            Ok((k1, sup_y, qv.sqrt(), d.clamped))
        })?;
        let kept: Vec<_> = rows.iter().filter(|r| !r.3).collect();
        excluded += rows.len() - kept.len();
        let k2 = Estimate::from_samples(&kept.iter().map(|r| r.0 * r.0).collect::<Vec<_>>()).mean;
        let y2 = Estimate::from_samples(&kept.iter().map(|r| r.1 * r.1).collect::<Vec<_>>()).mean;
        let ratio = if k2 == 0.0 { 0.0 } else { k2 / (APRIORI_CONSTANT * y2) };
        if worst.is_none_or(|w| ratio > w.0) {
            worst = Some((ratio, k2, APRIORI_CONSTANT * y2));
        }
        kn = kn.max(k2.sqrt());
        yn = yn.max(y2.sqrt());
        hn = hn.max(Estimate::from_samples(&kept.iter().map(|r| r.2 * r.2).collect::<Vec<_>>()).mean.sqrt());
    }
    let (ratio, left, right) = worst.expect("family is non-empty");
    let grid = field.grid();
    Ok(InequalityReport::new("apriori", left, right, Some(APRIORI_CONSTANT), 0.0, vec![])
        .with_detail("worst_ratio", ratio)
        .with_detail("aggregate_ratio", if yn > 0.0 { (hn + kn) / yn } else { 0.0 })
        .with_detail("excluded_paths", excluded as f64)
        .with_fingerprint(Fingerprint::new(&mc, family, Some(grid))))
}

/// Norms of the differences of two decompositions over the family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifferenceNorms {
    pub y: (f64, f64),
    pub h: (f64, f64),
    pub k: (f64, f64),
}

fn difference_norms(f1: &ValueField, f2: &ValueField, family: &ControlFamily, mc: McSettings) -> Result<DifferenceNorms> {
    let m = mc.steps;
    let dt = 1.0 / m as f64;
    let seed = sub_seed(mc.seed, "difference/process");
    let (mut ys, mut hs, mut ks) = (Vec::new(), Vec::new(), Vec::new());
    for control in family.controls() {
        let alpha = control.on_grid(m);
        let rows = stream_paths(mc.n_paths, m, seed, &alpha, |x| {
            let a = decompose_path(f1, x, &alpha)?;
            let b = decompose_path(f2, x, &alpha)?;
            let sup = |u: &[f64], v: &[f64]| u.iter().zip(v).fold(0.0f64, |s, (p, q)| s.max((p - q).abs()));
            let qv: f64 = a.h.iter().zip(&b.h).zip(&alpha).map(|((p, q), al)| al * (p - q).powi(2) * dt).sum();
            Ok((sup(&a.y, &b.y), qv.sqrt(), sup(&a.k, &b.k), a.clamped || b.clamped))
        })?;
        let kept: Vec<_> = rows.into_iter().filter(|r| !r.3).collect();
        let col = |f: fn(&(f64, f64, f64, bool)) -> f64| kept.iter().map(f).collect::<Vec<_>>();
        ys.push(power_mean_estimate(&col(|r| r.0), 2.0));
        hs.push(power_mean_estimate(&col(|r| r.1), 2.0));
        ks.push(power_mean_estimate(&col(|r| r.2), 2.0));
    }
    Ok(DifferenceNorms {
        y: family_max(ys),
        h: family_max(hs),
        k: family_max(ks),
    })
}

/// `‖ξ‖_{L²_P}` on the same paths and time grid as [`difference_norms`], so that
/// `δY` and `δξ` are compared sample by sample.
fn l2_norm_of(payoff: &PayoffSpec, field: &ValueField, family: &ControlFamily, mc: McSettings) -> Result<NormEstimate> {
    let abs = conditional_expectation(&payoff.abs(), field.band(), field.grid())?;
    let mc = McSettings {
        seed: sub_seed(mc.seed, "difference/process"),
        ..mc
    };
    lp_norm(&abs, 2.0, family, mc, mc.steps)
}

/// `‖δY‖_{S²} ≤ ‖δξ‖_{L²_P}` and
/// `‖δH‖ + ‖δK‖ ≤ C* (‖δξ‖ + (‖ξ¹‖^{1/2} + ‖ξ²‖^{1/2}) ‖δξ‖^{1/2})`.
///
/// The second report records the constant the pair would need (`cstar_needed`)
/// and flags pairs needing more than twice the calibrated `cstar`.
pub fn difference_check(
    f1: &ValueField,
    f2: &ValueField,
    family: &ControlFamily,
    mc: McSettings,
    cstar: f64,
    slack: Slack,
) -> Result<Vec<InequalityReport>> {
    if f1.payoff().times() != f2.payoff().times() {
        return Err(Error::InvalidPayoff("payoffs must share monitoring times".into()));
    }
    let d = difference_norms(f1, f2, family, mc)?;
    let delta = f1.payoff().difference(f2.payoff())?;
    let dxi = l2_norm_of(&delta, f1, family, mc)?;
    let n1 = l2_norm_of(f1.payoff(), f1, family, mc)?;
    let n2 = l2_norm_of(f2.payoff(), f2, family, mc)?;
    let bracket = dxi.value + (n1.value.sqrt() + n2.value.sqrt()) * dxi.value.sqrt();
    let left = d.h.0 + d.k.0;
    let needed = if left == 0.0 { 0.0 } else { left / bracket };
    let fp = Fingerprint::new(&mc, family, Some(f1.grid()));
    Ok(vec![
        InequalityReport::new("difference-Y", d.y.0, dxi.value, Some(1.0), slack.total(&[d.y.1, dxi.std_err]), vec![d.y.1, dxi.std_err])
            .with_fingerprint(fp.clone()),
        InequalityReport::new(
            "difference-HK",
            left,
            cstar * bracket,
            Some(cstar),
            slack.total(&[d.h.1, d.k.1, cstar * dxi.std_err]),
            vec![d.h.1, d.k.1, dxi.std_err],
        )
        .with_detail("cstar_needed", needed)
        .with_detail("flagged", if needed > 2.0 * cstar { 1.0 } else { 0.0 })
        .with_fingerprint(fp),
    ])
}

/// Smallest `C*` that covers every calibration pair.
pub fn calibrate_cstar(pairs: &[(&ValueField, &ValueField)], family: &ControlFamily, mc: McSettings) -> Result<f64> {
    let mut c = 0.0f64;
    for (a, b) in pairs {
        let reports = difference_check(a, b, family, mc, 1.0, Slack::strict())?;
        c = c.max(reports[1].details["cstar_needed"]);
    }
    Ok(c)
}

/// `E^G[E^G_t[ξ]] = E^G[ξ]` with the inner value re-fed by interpolation on a refined grid.
pub fn tower_check(payoff: &PayoffSpec, band: &VolBand, grid: &SpaceTimeGrid, t: f64, tol: f64) -> Result<InequalityReport> {
    let j = payoff
        .times()
        .iter()
        .position(|&s| (s - t).abs() <= 1e-12)
        .ok_or_else(|| Error::InvalidArgument(format!("{t} is not a monitoring time")))?
        + 1;
    let field = conditional_expectation(payoff, band, &grid.clone().with_snapshots(1))?;
    let direct = field.initial_value();
    let clamped = AtomicUsize::new(0);
    let inner = |args: &[f64]| -> f64 {
        if j == payoff.n_monitoring() {
            return payoff.eval(args);
        }
        let q = field
            .value_at(t, args, args[j - 1])
            .expect("time and history are valid by construction");
        if q.clamped {
            clamped.fetch_add(1, Ordering::Relaxed);
        }
        q.value
    };
    let outer_grid = SpaceTimeGrid::new(grid.x_max, 2 * grid.nx - 1)?;
    let nested = g_expectation_of(&payoff.times()[..j], &inner, band, &outer_grid)?;
    Ok(InequalityReport::new("tower", (nested - direct).abs(), 0.0, None, tol, vec![])
        .with_detail("direct", direct)
        .with_detail("nested", nested)
        .with_detail("t", t)
        .with_detail("clamped_reads", clamped.into_inner() as f64))
}

/// `‖ξ‖_{L²_P} ≤ C_p ‖ξ‖_{L^p_G}` with `C_p = (p/(p−2))^{1/2}`.
///
/// `field_abs` must solve `|ξ|`. The right side is the family supremum of
/// `E^P[|ξ|^p]^{1/p}`. The report also spot-checks
/// `‖ξ‖_{L²_P} ≥ sup_P E^P[ξ²]^{1/2}` (`l2_chain_ok`).
pub fn doob_check(field_abs: &ValueField, p: f64, family: &ControlFamily, mc: McSettings, slack: Slack) -> Result<InequalityReport> {
    if !(p > 2.0) {
        return Err(Error::InvalidArgument(format!("need p > 2, got {p}")));
    }
    let payoff = field_abs.payoff();
    let lhs_mc = McSettings {
        seed: sub_seed(mc.seed, "doob/lhs"),
        ..mc
    };
    let lhs = lp_norm(field_abs, 2.0, family, lhs_mc, DEFAULT_SUP_POINTS.min(mc.steps))?;
    let terminal_norm = |seed: u64, q: f64| -> Result<(f64, f64)> {
        let mut rows = Vec::new();
        for control in family.controls() {
            let alpha = control.on_grid(mc.steps);
            let xs = stream_paths(mc.n_paths, mc.steps, seed, &alpha, |x| {
                Ok(payoff.eval(&monitored(payoff, x, mc.steps)?).abs())
            })?;
            rows.push(power_mean_estimate(&xs, q));
        }
        Ok(family_max(rows))
    };
    let (rhs, rse) = terminal_norm(sub_seed(mc.seed, "doob/rhs"), p)?;
    let (l2_lower, l2_se) = terminal_norm(lhs_mc.seed, 2.0)?;
    let cp = doob_constant(p);
    let chain_ok = l2_lower <= lhs.value + slack.total(&[l2_se, lhs.std_err]);
    Ok(InequalityReport::new(
        &format!("doob p={p}"),
        lhs.value,
        cp * rhs,
        Some(cp),
        slack.total(&[lhs.std_err, cp * rse]),
        vec![lhs.std_err, rse],
    )
    .with_detail("lp_g_norm", rhs)
    .with_detail("l2_lower", l2_lower)
    .with_detail("l2_chain_ok", if chain_ok { 1.0 } else { 0.0 })
    .with_fingerprint(Fingerprint::new(&mc, family, Some(field_abs.grid()))))
}
