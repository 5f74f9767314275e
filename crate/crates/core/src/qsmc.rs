//! Monte Carlo over the strong-formulation family of volatility controls.
//!
//! Under a deterministic control `α` the canonical process is synthesised as
//! `X_{k+1} = X_k + √α(t_k) ΔW_k`. Every estimator here returns a maximum over
//! a finite family and is therefore a statistical lower bound of the
//! corresponding supremum over all admissible measures.
//!
//! Path `i` always consumes the stream `(seed, i)`, so different controls see
//! the same Brownian increments (common random numbers) and a parallel run
//! reproduces a serial one bit for bit.

use std::io::{self, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfun::VolBand;
use crate::gpde::ValueField;
use crate::payoff::PayoffSpec;
use crate::rng::{path_stream, tree_sum, Estimate};

/// Floor used when the band's lower bound is zero.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// Piecewise-constant scalar volatility control on `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlProcess {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
    floor: f64,
}

impl ControlProcess {
    /// `breakpoints = [0, s_1, …, 1]`, one value per piece, each in `[max(floor, a̲), ā]`.
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>, floor: f64, band: &VolBand) -> Result<Self> {
        if band.dim() != 1 {
            return Err(Error::UnsupportedDimension(band.dim()));
        }
        if !(floor > 0.0 && floor.is_finite()) {
            return Err(Error::InvalidControl(format!("floor must be positive, got {floor}")));
        }
        if breakpoints.len() < 2 || breakpoints[0] != 0.0 || *breakpoints.last().unwrap() != 1.0 {
            return Err(Error::InvalidControl("breakpoints must run from 0 to 1".into()));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidControl("breakpoints must increase strictly".into()));
        }
        if values.len() != breakpoints.len() - 1 {
            return Err(Error::InvalidControl(format!(
                "{} pieces need {} values, got {}",
                breakpoints.len() - 1,
                breakpoints.len() - 1,
                values.len()
            )));
        }
        let lo = floor.max(band.lo());
        if let Some(v) = values.iter().find(|&&v| !(v >= lo && v <= band.hi())) {
            return Err(Error::InvalidControl(format!(
                "value {v} outside [{lo}, {}]",
                band.hi()
            )));
        }
        Ok(Self {
            breakpoints,
            values,
            floor,
        })
    }

    pub fn constant(alpha: f64, band: &VolBand) -> Result<Self> {
        Self::new(vec![0.0, 1.0], vec![alpha], default_floor(band), band)
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Right-continuous value at time `t`.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.breakpoints[1..].partition_point(|&s| s <= t);
        self.values[k.min(self.values.len() - 1)]
    }

    /// Values at the left endpoints `t_k = k/M`.
    pub fn on_grid(&self, steps: usize) -> Vec<f64> {
        let dt = 1.0 / steps as f64;
        (0..steps).map(|k| self.at(k as f64 * dt)).collect()
    }

    /// `∫₀¹ α dt`.
    pub fn integral(&self) -> f64 {
        self.breakpoints
            .windows(2)
            .zip(&self.values)
            .map(|(w, v)| v * (w[1] - w[0]))
            .sum()
    }
}

fn default_floor(band: &VolBand) -> f64 {
    if band.lo() > 0.0 {
        band.lo()
    } else {
        DEFAULT_FLOOR
    }
}

/// A finite set of labelled controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFamily {
    controls: Vec<ControlProcess>,
    labels: Vec<String>,
}

impl ControlFamily {
    pub fn new(controls: Vec<ControlProcess>, labels: Vec<String>) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::InvalidControl("empty control family".into()));
        }
        if controls.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: controls.len(),
                got: labels.len(),
            });
        }
        let floor = controls[0].floor;
        if controls.iter().any(|c| c.floor != floor) {
            return Err(Error::InvalidControl("controls disagree on the floor".into()));
        }
        Ok(Self { controls, labels })
    }

    /// `count` equally spaced constant controls spanning `[max(floor, a̲), ā]`.
    pub fn constant_grid(band: &VolBand, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidControl("empty control family".into()));
        }
        let floor = default_floor(band);
        let lo = floor.max(band.lo());
        let hi = band.hi();
        let values: Vec<f64> = if count == 1 {
            vec![hi]
        } else {
            (0..count)
                .map(|k| {
                    if k + 1 == count {
                        hi
                    } else {
                        lo + (hi - lo) * k as f64 / (count - 1) as f64
                    }
                })
                .collect()
        };
        let controls = values
            .iter()
            .map(|&v| ControlProcess::new(vec![0.0, 1.0], vec![v], floor, band))
            .collect::<Result<Vec<_>>>()?;
        let labels = values.iter().map(|v| format!("const({v})")).collect();
        Self::new(controls, labels)
    }

    /// Appends `count` controls with `pieces` equal pieces and uniformly drawn values.
    pub fn with_random_piecewise(
        mut self,
        band: &VolBand,
        pieces: usize,
        count: usize,
        seed: u64,
    ) -> Result<Self> {
        if pieces == 0 {
            return Err(Error::InvalidControl("a control needs at least one piece".into()));
        }
        let floor = self.controls[0].floor;
        let lo = floor.max(band.lo());
        let breaks: Vec<f64> = (0..=pieces).map(|k| k as f64 / pieces as f64).collect();
        let mut rng = path_stream(seed, u64::MAX);
        for i in 0..count {
            let values = (0..pieces)
                .map(|_| lo + (band.hi() - lo) * rng.random::<f64>())
                .collect();
            self.controls
                .push(ControlProcess::new(breaks.clone(), values, floor, band)?);
            self.labels.push(format!("piecewise#{i}"));
        }
        Ok(self)
    }

    pub fn controls(&self) -> &[ControlProcess] {
        &self.controls
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.controls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.controls.is_empty()
    }

    /// Flat key-value description:
    ///
    /// ```text
    /// floor = 0.000001
    /// [control]
    /// label = const(1.5)
    /// breakpoints = 0 1
    /// values = 1.5
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = format!("floor = {:?}\n", self.controls[0].floor);
        for (c, l) in self.controls.iter().zip(&self.labels) {
            s.push_str("\n[control]\n");
            s.push_str(&format!("label = {l}\n"));
            s.push_str(&format!("breakpoints = {}\n", join(&c.breakpoints)));
            s.push_str(&format!("values = {}\n", join(&c.values)));
        }
        s
    }

    pub fn from_text(text: &str, band: &VolBand) -> Result<Self> {
        let mut floor = None;
        let mut blocks: Vec<[Option<String>; 3]> = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[control]" {
                blocks.push([None, None, None]);
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                pos: no + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            let (k, v) = (k.trim(), v.trim().to_string());
            let slot = match (k, blocks.last_mut()) {
                ("floor", None) => {
                    floor = Some(parse_num(&v, no)?);
                    continue;
                }
                ("label", Some(b)) => &mut b[0],
                ("breakpoints", Some(b)) => &mut b[1],
                ("values", Some(b)) => &mut b[2],
                _ => {
                    return Err(Error::Parse {
                        pos: no + 1,
                        msg: format!("unexpected key `{k}`"),
                    })
                }
            };
            *slot = Some(v);
        }
        let floor = floor.unwrap_or_else(|| default_floor(band));
        let mut controls = Vec::new();
        let mut labels = Vec::new();
        for (i, [label, breaks, values]) in blocks.into_iter().enumerate() {
            let missing = |what: &str| Error::InvalidControl(format!("control {i} lacks `{what}`"));
            let breaks = parse_list(&breaks.ok_or_else(|| missing("breakpoints"))?)?;
            let values = parse_list(&values.ok_or_else(|| missing("values"))?)?;
            controls.push(ControlProcess::new(breaks, values, floor, band)?);
            labels.push(label.unwrap_or_else(|| format!("control#{i}")));
        }
        Self::new(controls, labels)
    }
}

fn join(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

fn parse_num(s: &str, line: usize) -> Result<f64> {
    s.parse().map_err(|_| Error::Parse {
        pos: line + 1,
        msg: format!("not a number: `{s}`"),
    })
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|t| !t.is_empty())
        .map(|t| parse_num(t, 0))
        .collect()
}

/// Brownian increments `ΔW_k ~ N(0, 1/M)` of path `index`.
pub fn brownian_increments(seed: u64, index: u64, steps: usize) -> Vec<f64> {
    let mut rng = path_stream(seed, index);
    let sd = (1.0 / steps as f64).sqrt();
    (0..steps)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `X_0 = 0`, `X_{k+1} = X_k + √α_k ΔW_k`.
pub fn synthesize(alpha: &[f64], dw: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(dw.len() + 1);
    x.push(0.0);
    let mut cur = 0.0;
    for (a, w) in alpha.iter().zip(dw) {
        cur += a.sqrt() * w;
        x.push(cur);
    }
    x
}

/// Simulated paths under one control.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBundle {
    pub seed: u64,
    pub n_paths: usize,
    pub steps: usize,
    control: ControlProcess,
    /// `α(t_k)` for `k < M`.
    alpha: Vec<f64>,
    /// Accounting quadratic variation `Σ_{j<k} α_j Δt`, shared by all paths.
    qv: Vec<f64>,
    dw: Vec<f64>,
    x: Vec<f64>,
}

/// Simulates `n` paths with `m` Euler steps on `[0, 1]`.
pub fn simulate(control: &ControlProcess, n: usize, m: usize, seed: u64) -> Result<PathBundle> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("need at least one path and one step".into()));
    }
    let alpha = control.on_grid(m);
    let per_path: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dw = brownian_increments(seed, i as u64, m);
            let x = synthesize(&alpha, &dw);
            (dw, x)
        })
        .collect();
    let mut dw = Vec::with_capacity(n * m);
    let mut x = Vec::with_capacity(n * (m + 1));
    for (w, p) in per_path {
        dw.extend(w);
        x.extend(p);
    }
    Ok(PathBundle::assemble(control.clone(), alpha, seed, n, m, dw, x))
}

impl PathBundle {
    fn assemble(
        control: ControlProcess,
        alpha: Vec<f64>,
        seed: u64,
        n_paths: usize,
        steps: usize,
        dw: Vec<f64>,
        x: Vec<f64>,
    ) -> Self {
        let dt = 1.0 / steps as f64;
        let mut qv = Vec::with_capacity(steps + 1);
        qv.push(0.0);
        let mut acc = 0.0;
        for a in &alpha {
            acc += a * dt;
            qv.push(acc);
        }
        Self {
            seed,
            n_paths,
            steps,
            control,
            alpha,
            qv,
            dw,
            x,
        }
    }

    /// Builds a bundle from explicit increments (`n × m`, row per path).
    pub fn from_increments(control: &ControlProcess, m: usize, dw: Vec<f64>) -> Result<Self> {
        if m == 0 || dw.is_empty() || dw.len() % m != 0 {
            return Err(Error::Misaligned(format!(
                "{} increments do not fill rows of {m}",
                dw.len()
            )));
        }
        let alpha = control.on_grid(m);
        let n = dw.len() / m;
        let x = dw.chunks(m).flat_map(|w| synthesize(&alpha, w)).collect();
        Ok(Self::assemble(control.clone(), alpha, 0, n, m, dw, x))
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt()
    }

    pub fn control(&self) -> &ControlProcess {
        &self.control
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn path(&self, i: usize) -> &[f64] {
        &self.x[i * (self.steps + 1)..(i + 1) * (self.steps + 1)]
    }

    pub fn increments(&self, i: usize) -> &[f64] {
        &self.dw[i * self.steps..(i + 1) * self.steps]
    }

    /// Accounting quadratic variation on the time grid (identical for every path).
    pub fn qv(&self) -> &[f64] {
        &self.qv
    }

    /// Grid index of time `t`, which must be a multiple of `1/M`.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        grid_index(t, self.steps)
    }

    /// Writes `path_id, t, X, qv, alpha` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "path_id,t,X,qv,alpha")?;
        for i in 0..self.n_paths {
            for (k, x) in self.path(i).iter().enumerate() {
                let a = self.alpha[k.min(self.steps - 1)];
                writeln!(out, "{i},{:?},{x:?},{:?},{a:?}", self.time(k), self.qv[k])?;
            }
        }
        Ok(())
    }
}

/// Grid index of `t` on a grid of `steps` steps over `[0, 1]`; errors unless `t` is a grid time.
pub fn grid_index(t: f64, steps: usize) -> Result<usize> {
    let s = t * steps as f64;
    let k = s.round();
    if !(0.0..=1.0).contains(&t) || (s - k).abs() > 1e-9 * steps as f64 {
        return Err(Error::MisalignedTime(t));
    }
    Ok(k as usize)
}

/// Path values at the monitoring times.
pub fn monitored(payoff: &PayoffSpec, path: &[f64], steps: usize) -> Result<Vec<f64>> {
    payoff
        .times()
        .iter()
        .map(|&t| grid_index(t, steps).map(|k| path[k]))
        .collect()
}

/// MC estimate of `E^{P^α}[ξ]` under one control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlEstimate {
    pub label: String,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualValue {
    pub value: f64,
    pub std_err: f64,
    pub argmax: usize,
    pub argmax_label: String,
    pub table: Vec<ControlEstimate>,
}

/// Maximum over the family of `E^{P^α}[ξ]`; a lower bound of `E^G[ξ]`.
pub fn dual_value(
    payoff: &PayoffSpec,
    family: &ControlFamily,
    n: usize,
    m: usize,
    seed: u64,
) -> Result<DualValue> {
    let table = per_control(family, |control| {
        let alpha = control.on_grid(m);
        let samples = stream_paths(n, m, seed, &alpha, |x| {
            Ok(payoff.eval(&monitored(payoff, x, m)?))
        })?;
        Ok(Estimate::from_samples(&samples))
    })?;
    Ok(best(family, table, |e| e.mean))
}

fn per_control<F>(family: &ControlFamily, f: F) -> Result<Vec<ControlEstimate>>
where
    F: Fn(&ControlProcess) -> Result<Estimate>,
{
    family
        .controls
        .iter()
        .zip(&family.labels)
        .map(|(c, l)| {
            Ok(ControlEstimate {
                label: l.clone(),
                estimate: f(c)?,
            })
        })
        .collect()
}

fn best(family: &ControlFamily, table: Vec<ControlEstimate>, key: impl Fn(&Estimate) -> f64) -> DualValue {
    // First maximiser wins so that ties resolve deterministically.
    let mut argmax = 0;
    for (i, row) in table.iter().enumerate() {
        if key(&row.estimate) > key(&table[argmax].estimate) {
            argmax = i;
        }
    }
    DualValue {
        value: key(&table[argmax].estimate),
        std_err: table[argmax].estimate.std_err,
        argmax,
        argmax_label: family.labels[argmax].clone(),
        table,
    }
}

/// Runs `f` on every synthesised path without storing the bundle.
pub(crate) fn stream_paths<T, F>(n: usize, m: usize, seed: u64, alpha: &[f64], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[f64]) -> Result<T> + Sync,
{
    if n == 0 || m == 0 {
        return Err(Error::InvalidArgument("need at least one path and one step".into()));
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let dw = brownian_increments(seed, i as u64, m);
            f(&synthesize(alpha, &dw))
        })
        .collect()
}

/// Per-path values of `E^G_t[ξ]` plus a flag for reads outside the truncation box.
#[derive(Debug, Clone, PartialEq)]
pub struct PathValues {
    pub values: Vec<f64>,
    pub clamped: Vec<bool>,
}

/// Reads `E^G_t[ξ]` along path `x` (grid of `m` steps) at grid time `t`.
///
/// At `t = 1` the payoff itself is evaluated, so the terminal read is exact.
pub fn conditional_value_on_path(field: &ValueField, x: &[f64], m: usize, t: f64) -> Result<(f64, bool)> {
    let k = grid_index(t, m)?;
    let payoff = field.payoff();
    if k == m {
        return Ok((payoff.eval(&monitored(payoff, x, m)?), false));
    }
    let history: Vec<f64> = payoff
        .times()
        .iter()
        .take_while(|&&s| s <= t)
        .map(|&s| grid_index(s, m).map(|j| x[j]))
        .collect::<Result<_>>()?;
    let q = field.value_at(t, &history, x[k])?;
    Ok((q.value, q.clamped))
}

/// `E^G_t[ξ]` along every path of the bundle.
pub fn conditional_supremum(field: &ValueField, bundle: &PathBundle, t: f64) -> Result<PathValues> {
    let pairs: Vec<(f64, bool)> = (0..bundle.n_paths)
        .into_par_iter()
        .map(|i| conditional_value_on_path(field, bundle.path(i), bundle.steps, t))
        .collect::<Result<_>>()?;
    let (values, clamped) = pairs.into_iter().unzip();
    Ok(PathValues { values, clamped })
}

/// Simulation settings shared by the norm estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub n_paths: usize,
    pub steps: usize,
    pub seed: u64,
}

/// A norm estimate: the family maximum and the per-control table of `E[S^p]^{1/p}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    /// Delta-method standard error of the maximising row.
    pub std_err: f64,
    pub argmax: usize,
    pub per_control: Vec<(String, f64)>,
    /// Paths on which some read left the truncation box.
    pub clamped_paths: usize,
}

/// `E[S^p]^{1/p}` computed as `m · E[(S/m)^p]^{1/p}` with `m = max S`,
/// so that constant samples reproduce their value exactly.
pub fn power_mean(samples: &[f64], p: f64) -> f64 {
    let top = samples.iter().fold(0.0f64, |m, &s| m.max(s));
    if top == 0.0 {
        return 0.0;
    }
    let scaled: Vec<f64> = samples.iter().map(|s| (s / top).powf(p)).collect();
    let mean = tree_sum(&scaled) / samples.len() as f64;
    top * mean.powf(1.0 / p)
}

/// [`power_mean`] with its delta-method standard error.
pub fn power_mean_estimate(samples: &[f64], p: f64) -> (f64, f64) {
    let top = samples.iter().fold(0.0f64, |m, &s| m.max(s));
    if top == 0.0 {
        return (0.0, 0.0);
    }
    let scaled: Vec<f64> = samples.iter().map(|s| (s / top).powf(p)).collect();
    let e = Estimate::from_samples(&scaled);
    let value = top * e.mean.powf(1.0 / p);
    let se = top * e.mean.powf(1.0 / p - 1.0) * e.std_err / p;
    (value, se)
}

struct NormRow {
    value: f64,
    se: f64,
    clamped: usize,
}

fn norm_from(labels: &[String], rows: Vec<NormRow>) -> NormEstimate {
    let mut argmax = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.value > rows[argmax].value {
            argmax = i;
        }
    }
    NormEstimate {
        value: rows[argmax].value,
        std_err: rows[argmax].se,
        argmax,
        per_control: labels.iter().cloned().zip(rows.iter().map(|r| r.value)).collect(),
        clamped_paths: rows.iter().map(|r| r.clamped).sum(),
    }
}

/// `sup_P E^P[sup_t (E^G_t |ξ|)^p]^{1/p}` with the inner supremum over
/// `sup_points + 1` equally spaced grid times. `field` must solve a non-negative payoff.
pub fn lp_norm(
    field: &ValueField,
    p: f64,
    family: &ControlFamily,
    mc: McSettings,
    sup_points: usize,
) -> Result<NormEstimate> {
    check_p(p)?;
    if !field.payoff().is_nonnegative() {
        return Err(Error::InvalidPayoff(
            "the norm needs the field of |ξ|; use PayoffSpec::abs".into(),
        ));
    }
    let m = mc.steps;
    let points = sup_points.clamp(1, m);
    if m % points != 0 {
        return Err(Error::InvalidArgument(format!(
            "sup_points {points} must divide the step count {m}"
        )));
    }
    let stride = m / points;
    let mut rows = Vec::with_capacity(family.len());
    for control in family.controls() {
        let alpha = control.on_grid(m);
        let per_path = stream_paths(mc.n_paths, m, mc.seed, &alpha, |x| {
            let mut sup = 0.0f64;
            let mut clamped = false;
            for k in (0..=m).step_by(stride) {
                let (v, c) = conditional_value_on_path(field, x, m, k as f64 / m as f64)?;
                sup = sup.max(v.abs());
                clamped |= c;
            }
            Ok((sup, clamped))
        })?;
        let sups: Vec<f64> = per_path.iter().map(|r| r.0).collect();
        let (value, se) = power_mean_estimate(&sups, p);
        rows.push(NormRow {
            value,
            se,
            clamped: per_path.iter().filter(|r| r.1).count(),
        });
    }
    Ok(norm_from(family.labels(), rows))
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("p must be ≥ 1, got {p}")));
    }
    Ok(())
}

/// Per-path samples of a process on a bundle's time grid (`n_paths × n_times`, row per path).
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessSamples {
    pub n_paths: usize,
    pub n_times: usize,
    pub values: Vec<f64>,
}

impl ProcessSamples {
    pub fn new(n_paths: usize, n_times: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_paths * n_times {
            return Err(Error::Misaligned(format!(
                "{} values for {n_paths} × {n_times}",
                values.len()
            )));
        }
        Ok(Self {
            n_paths,
            n_times,
            values,
        })
    }

    /// Samples `f(t_k, X_k)` on every grid point of the bundle.
    pub fn from_fn(bundle: &PathBundle, n_times: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(bundle.n_paths * n_times);
        for i in 0..bundle.n_paths {
            let x = bundle.path(i);
            values.extend((0..n_times).map(|k| f(bundle.time(k), x[k])));
        }
        Self {
            n_paths: bundle.n_paths,
            n_times,
            values,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_times..(i + 1) * self.n_times]
    }
}

/// `sup_P E^P[(∫ H² d⟨B⟩)^{p/2}]^{1/p}` over the supplied bundles, one per control.
///
/// `h` holds `M` left-point samples per path for each bundle.
pub fn hp_norm(h: &[ProcessSamples], bundles: &[PathBundle], p: f64) -> Result<NormEstimate> {
    check_p(p)?;
    check_pairs(h, bundles, |b| b.steps)?;
    let rows = h
        .iter()
        .zip(bundles)
        .map(|(s, b)| {
            let dt = b.dt();
            let qv: Vec<f64> = (0..s.n_paths)
                .map(|i| {
                    let terms: Vec<f64> = s
                        .row(i)
                        .iter()
                        .zip(&b.alpha)
                        .map(|(h, a)| a * h * h * dt)
                        .collect();
                    tree_sum(&terms).sqrt()
                })
                .collect();
            let (value, se) = power_mean_estimate(&qv, p);
            NormRow { value, se, clamped: 0 }
        })
        .collect();
    Ok(norm_from(&labels_of(bundles), rows))
}

/// `sup_P E^P[sup_t |Y_t|^p]^{1/p}` over the supplied bundles.
///
/// `y` holds `M + 1` samples per path for each bundle.
pub fn sp_norm(y: &[ProcessSamples], bundles: &[PathBundle], p: f64) -> Result<NormEstimate> {
    check_p(p)?;
    check_pairs(y, bundles, |b| b.steps + 1)?;
    let rows = y
        .iter()
        .map(|s| {
            let sups: Vec<f64> = (0..s.n_paths)
                .map(|i| s.row(i).iter().fold(0.0f64, |m, v| m.max(v.abs())))
                .collect();
            let (value, se) = power_mean_estimate(&sups, p);
            NormRow { value, se, clamped: 0 }
        })
        .collect();
    Ok(norm_from(&labels_of(bundles), rows))
}

fn labels_of(bundles: &[PathBundle]) -> Vec<String> {
    bundles
        .iter()
        .map(|b| format!("{:?}", b.control.values()))
        .collect()
}

fn check_pairs(
    s: &[ProcessSamples],
    bundles: &[PathBundle],
    times: impl Fn(&PathBundle) -> usize,
) -> Result<()> {
    if s.is_empty() || s.len() != bundles.len() {
        return Err(Error::Misaligned(format!(
            "{} sample sets for {} bundles",
            s.len(),
            bundles.len()
        )));
    }
    for (x, b) in s.iter().zip(bundles) {
        if x.n_paths != b.n_paths || x.n_times != times(b) {
            return Err(Error::Misaligned(format!(
                "samples {} × {} do not match bundle {} × {}",
                x.n_paths,
                x.n_times,
                b.n_paths,
                times(b)
            )));
        }
    }
    Ok(())
}

/// Residual of the quadratic-variation identity along the bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QvResidual {
    /// Largest residual over all paths and times.
    pub max: f64,
    /// Root mean square over paths of the per-path supremum.
    pub rms: f64,
}

/// Compares `X_t² − 2 Σ X_{k} ΔX_k` (realised variation via the discrete Itô sum)
/// with the accounting variation `∫ α dt`.
pub fn qv_identity_check(bundle: &PathBundle) -> QvResidual {
    let sups: Vec<f64> = (0..bundle.n_paths)
        .into_par_iter()
        .map(|i| {
            let x = bundle.path(i);
            let mut ito = 0.0;
            let mut sup = 0.0f64;
            for k in 0..bundle.steps {
                ito += x[k] * (x[k + 1] - x[k]);
                let realised = x[k + 1] * x[k + 1] - 2.0 * ito;
                sup = sup.max((realised - bundle.qv[k + 1]).abs());
            }
            sup
        })
        .collect();
    let sq: Vec<f64> = sups.iter().map(|s| s * s).collect();
    QvResidual {
        max: sups.iter().fold(0.0, |m, &s| m.max(s)),
        rms: (tree_sum(&sq) / sups.len() as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gpde::{conditional_expectation, SpaceTimeGrid};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn band() -> VolBand {
        VolBand::scalar(1.0, 2.0).unwrap()
    }

    #[test]
    fn control_validation() {
        let b = band();
        assert!(ControlProcess::new(vec![0.0, 1.0], vec![2.5], 1e-6, &b).is_err());
        assert!(ControlProcess::new(vec![0.0, 0.5], vec![1.5], 1e-6, &b).is_err());
        assert!(ControlProcess::new(vec![0.0, 0.5, 1.0], vec![1.5], 1e-6, &b).is_err());
        assert!(ControlProcess::new(vec![0.0, 1.0], vec![1.5], 0.0, &b).is_err());
        let zero = VolBand::scalar(0.0, 1.0).unwrap();
        let c = ControlProcess::constant(DEFAULT_FLOOR, &zero).unwrap();
        assert_eq!(c.floor(), DEFAULT_FLOOR);
        assert!(ControlProcess::constant(0.0, &zero).is_err());
        let two = ControlProcess::new(vec![0.0, 0.5, 1.0], vec![1.0, 2.0], 1.0, &b).unwrap();
        assert_eq!(two.at(0.25), 1.0);
        assert_eq!(two.at(0.5), 2.0);
        assert_eq!(two.at(1.0), 2.0);
    }

    #[test]
    fn accounting_quadratic_variation() {
        let b = band();
        let c = ControlProcess::constant(1.5, &b).unwrap();
        let pb = simulate(&c, 50, 256, 3).unwrap();
        assert_eq!(*pb.qv().last().unwrap(), 1.5);
        let two = ControlProcess::new(vec![0.0, 0.5, 1.0], vec![1.0, 2.0], 1.0, &b).unwrap();
        let pb = simulate(&two, 5, 256, 3).unwrap();
        assert_eq!(*pb.qv().last().unwrap(), 1.5);
        assert_eq!(two.integral(), 1.5);
        assert!(pb.path(0)[0] == 0.0);
    }

    #[test]
    fn terminal_variance_matches_control() {
        let c = ControlProcess::constant(2.0, &band()).unwrap();
        let n = 100_000;
        let xs = stream_paths(n, 8, 11, &c.on_grid(8), |x| Ok(x[8])).unwrap();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let e = Estimate::from_samples(&sq);
        // Var(X²) = 2·σ⁴ for a centred Gaussian.
        let se = (2.0 * 4.0 / n as f64).sqrt();
        assert!((e.mean - 2.0).abs() <= 3.0 * se, "{e:?}");
    }

    #[test]
    fn simulation_is_deterministic() {
        let c = ControlProcess::constant(1.25, &band()).unwrap();
        let a = simulate(&c, 64, 32, 99).unwrap();
        let b = simulate(&c, 64, 32, 99).unwrap();
        assert_eq!(a, b);
        let serial: Vec<f64> = (0..64).flat_map(|i| brownian_increments(99, i, 32)).collect();
        assert_eq!(serial, a.dw);
        assert_ne!(simulate(&c, 64, 32, 100).unwrap().dw, a.dw);
    }

    #[test]
    fn dual_value_oracles() {
        let b = band();
        let fam = ControlFamily::constant_grid(&b, 5).unwrap();
        let sq = PayoffSpec::parse("sq(x1)", vec![1.0]).unwrap();
        let up = dual_value(&sq, &fam, 20_000, 16, 5).unwrap();
        assert_eq!(up.argmax_label, "const(2)");
        assert_abs_diff_eq!(up.value, 2.0, epsilon = 4.0 * up.std_err);
        let down = dual_value(&sq.negated(), &fam, 20_000, 16, 5).unwrap();
        assert_eq!(down.argmax_label, "const(1)");
        assert_abs_diff_eq!(down.value, -1.0, epsilon = 4.0 * down.std_err);
        let c = PayoffSpec::parse("const(0.7)", vec![1.0]).unwrap();
        let v = dual_value(&c, &fam, 1000, 4, 5).unwrap();
        assert_eq!(v.value, 0.7);
        assert_eq!(v.std_err, 0.0);
    }

    #[test]
    fn enlarging_family_never_lowers_value() {
        let b = band();
        let small = ControlFamily::constant_grid(&b, 3).unwrap();
        let large = small.clone().with_random_piecewise(&b, 4, 6, 1).unwrap();
        let p = PayoffSpec::parse("min(abs(x2), 1) - x1", vec![0.5, 1.0]).unwrap();
        let s = dual_value(&p, &small, 4000, 16, 8).unwrap();
        let l = dual_value(&p, &large, 4000, 16, 8).unwrap();
        assert!(l.value >= s.value);
        assert_eq!(l.table[..3], s.table[..]);
    }

    #[test]
    fn misaligned_monitoring() {
        let fam = ControlFamily::constant_grid(&band(), 2).unwrap();
        let p = PayoffSpec::parse("x1", vec![0.3, 1.0]).unwrap();
        assert!(matches!(
            dual_value(&p, &fam, 10, 16, 1),
            Err(Error::MisalignedTime(_))
        ));
    }

    #[test]
    fn conditional_reads() {
        let b = band();
        let grid = SpaceTimeGrid::new(8.0, 401).unwrap().with_snapshots(16);
        let p = PayoffSpec::parse("sq(x1)", vec![1.0]).unwrap();
        let field = conditional_expectation(&p, &b, &grid).unwrap();
        let c = ControlProcess::constant(1.5, &b).unwrap();
        let pb = simulate(&c, 200, 64, 2).unwrap();
        let mid = conditional_supremum(&field, &pb, 0.5).unwrap();
        for i in 0..pb.n_paths {
            let x = pb.path(i)[32];
            assert_abs_diff_eq!(mid.values[i], x * x + 1.0, epsilon = 2e-2);
        }
        let end = conditional_supremum(&field, &pb, 1.0).unwrap();
        for i in 0..pb.n_paths {
            assert_eq!(end.values[i], pb.path(i)[64].powi(2));
        }
        let start = conditional_supremum(&field, &pb, 0.0).unwrap();
        assert!(start.values.iter().all(|&v| v == field.initial_value()));
        assert!(conditional_supremum(&field, &pb, 0.3).is_err());
    }

    #[test]
    fn norm_oracles() {
        let b = band();
        let fam = ControlFamily::constant_grid(&b, 3).unwrap();
        let grid = SpaceTimeGrid::new(8.0, 201).unwrap().with_snapshots(16);
        let mc = McSettings {
            n_paths: 2000,
            steps: 16,
            seed: 4,
        };
        let one = PayoffSpec::parse("const(1)", vec![1.0]).unwrap();
        let f1 = conditional_expectation(&one, &b, &grid).unwrap();
        for p in [1.0, 2.0, 3.5] {
            assert_eq!(lp_norm(&f1, p, &fam, mc, 4).unwrap().value, 1.0);
        }
        let x = PayoffSpec::parse("x1", vec![1.0]).unwrap();
        assert!(lp_norm(&conditional_expectation(&x, &b, &grid).unwrap(), 2.0, &fam, mc, 4).is_err());
        let fa = conditional_expectation(&x.abs(), &b, &grid).unwrap();
        let l1 = lp_norm(&fa, 1.0, &fam, mc, 4).unwrap();
        let l2 = lp_norm(&fa, 2.0, &fam, mc, 4).unwrap();
        assert!(l1.value <= l2.value);
        // Lower-bound sanity: E[|X_1|²] under ā = 2.
        assert!(l2.value * l2.value >= 2.0 - 0.15, "{l2:?}");

        let bundles: Vec<PathBundle> = fam
            .controls()
            .iter()
            .map(|c| simulate(c, 100, 64, 1).unwrap())
            .collect();
        let ones: Vec<ProcessSamples> = bundles.iter().map(|b| ProcessSamples::from_fn(b, 64, |_, _| 1.0)).collect();
        let hp = hp_norm(&ones, &bundles, 2.0).unwrap();
        assert_abs_diff_eq!(hp.value * hp.value, 2.0, epsilon = 1e-12);
        let zeros: Vec<ProcessSamples> = bundles.iter().map(|b| ProcessSamples::from_fn(b, 64, |_, _| 0.0)).collect();
        assert_eq!(hp_norm(&zeros, &bundles, 2.0).unwrap().value, 0.0);
        let ys: Vec<ProcessSamples> = bundles.iter().map(|b| ProcessSamples::from_fn(b, 65, |_, _| -3.0)).collect();
        assert_eq!(sp_norm(&ys, &bundles, 3.0).unwrap().value, 3.0);
        assert!(matches!(sp_norm(&ones, &bundles, 2.0), Err(Error::Misaligned(_))));
    }

    #[test]
    fn qv_identity_scaling() {
        let c = ControlProcess::constant(2.0, &band()).unwrap();
        let coarse = qv_identity_check(&simulate(&c, 1000, 1 << 10, 7).unwrap());
        let fine = qv_identity_check(&simulate(&c, 1000, 1 << 12, 7).unwrap());
        let dt = 1.0 / 4096.0f64;
        assert!(fine.rms <= 5.0 * dt.sqrt() * 2.0, "{fine:?}");
        let ratio = fine.rms / coarse.rms;
        assert!((0.35..=0.65).contains(&ratio), "ratio {ratio}");
        assert!(fine.max >= fine.rms);
    }

    #[test]
    fn qv_identity_with_frozen_path() {
        let c = ControlProcess::constant(1.0, &band()).unwrap();
        let pb = PathBundle::from_increments(&c, 8, vec![0.0; 8]).unwrap();
        // The realised variation vanishes, so the residual is the accounting variation.
        assert_eq!(qv_identity_check(&pb).max, 1.0);
        let d = 0.25;
        let ito = PathBundle::from_increments(&c, 4, vec![0.0; 4]).unwrap();
        assert_eq!(ito.path(0), &[0.0; 5]);
        let exact = PathBundle::from_increments(&c, 4, vec![0.5, -0.5, 0.5, -0.5]).unwrap();
        // ΔX² = 0.25 = α Δt at every step.
        assert_eq!(qv_identity_check(&exact).max, 0.0);
        assert_eq!(exact.qv()[1], d);
    }

    #[test]
    fn family_text_round_trip() {
        let b = band();
        let fam = ControlFamily::constant_grid(&b, 3)
            .unwrap()
            .with_random_piecewise(&b, 2, 2, 9)
            .unwrap();
        let back = ControlFamily::from_text(&fam.to_text(), &b).unwrap();
        assert_eq!(back, fam);
        assert!(ControlFamily::from_text("floor = 1\nbogus = 2\n", &b).is_err());
        assert!(ControlFamily::from_text("floor = 1\n", &b).is_err());
    }

    #[test]
    fn bundle_csv() {
        let c = ControlProcess::constant(1.0, &band()).unwrap();
        let pb = simulate(&c, 2, 4, 1).unwrap();
        let mut out = Vec::new();
        pb.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 5);
        assert!(text.starts_with("path_id,t,X,qv,alpha\n0,0.0,0.0,0.0,1.0\n"));
    }

    proptest! {
        #[test]
        fn qv_accounting_is_exact(values in proptest::collection::vec(1.0f64..=2.0, 1..5)) {
            let b = band();
            let pieces = values.len();
            let breaks: Vec<f64> = (0..=pieces).map(|k| k as f64 / pieces as f64).collect();
            let c = ControlProcess::new(breaks, values, 1.0, &b).unwrap();
            let m = 64 * pieces;
            let pb = simulate(&c, 1, m, 0).unwrap();
            prop_assert!((pb.qv()[m] - c.integral()).abs() <= 1e-12);
        }

        #[test]
        fn power_mean_is_monotone_in_p(xs in proptest::collection::vec(0.0f64..5.0, 1..40)) {
            prop_assert!(power_mean(&xs, 1.0) <= power_mean(&xs, 2.0) * (1.0 + 1e-12) + 1e-15);
            prop_assert!(power_mean(&xs, 2.0) <= power_mean(&xs, 4.0) * (1.0 + 1e-12) + 1e-15);
        }
    }
}
