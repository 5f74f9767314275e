//! Monotone explicit finite differences for the nonlinear heat equation
//!
//! ```text
//! −∂_t v_i − G(∂²_x v_i) = 0   on [t_{i−1}, t_i),
//! v_i(t_i, x_1, …, x_{i−1}, x) = v_{i+1}(t_i, x_1, …, x_{i−1}, x, x),
//! v_n(1, ·) = φ,
//! ```
//!
//! which defines the conditional G-expectation of a cylinder payoff as
//! `E^G_t[ξ] = v_i(t, B_{t1}, …, B_{t_{i−1}}, B_t)`. Only scalar bands are
//! supported here.
//!
//! The scheme `u ← u + Δt · G(D²u)` with central second differences is
//! monotone whenever `Δt ≤ Δx² / ā`. At `±X_max` the second difference is
//! set to zero, so boundary values stay at their terminal data.

use std::io::{self, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfun::{g_scalar, VolBand};
use crate::payoff::PayoffSpec;

/// Upper limit on stored field values (doubles) for one nested solve.
pub const MAX_FIELD_VALUES: usize = 60_000_000;

/// Treatment of the truncation boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryRule {
    /// Second difference forced to zero (the solution is frozen there).
    LinearExtrapolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    /// Spatial truncation half-width.
    pub x_max: f64,
    /// Spatial node count (odd, so `x = 0` is a node).
    pub nx: usize,
    /// Fraction of the CFL limit used when the time step is derived.
    pub cfl: f64,
    /// Explicit time-step count per unit time; derived from the CFL bound when `None`.
    pub steps_per_unit: Option<usize>,
    /// Stored time slices per unit time.
    pub snapshots_per_unit: usize,
    pub boundary: BoundaryRule,
}

impl SpaceTimeGrid {
    pub fn new(x_max: f64, nx: usize) -> Result<Self> {
        let g = Self {
            x_max,
            nx,
            cfl: 0.9,
            steps_per_unit: None,
            snapshots_per_unit: 256,
            boundary: BoundaryRule::LinearExtrapolation,
        };
        g.validate()?;
        Ok(g)
    }

    /// `N_x = 401` and `X_max ≥ 8 √ā`, widened so that `Δx` is a power of two.
    ///
    /// With a dyadic step every node is exact, so affine data has exactly zero
    /// second differences and is preserved bit for bit.
    pub fn for_band(band: &VolBand) -> Self {
        let nx = 401;
        let dx = (16.0 * band.hi().sqrt() / (nx - 1) as f64).log2().ceil().exp2();
        Self::new(dx * ((nx - 1) / 2) as f64, nx).expect("default grid is valid")
    }

    pub fn with_snapshots(mut self, per_unit: usize) -> Self {
        self.snapshots_per_unit = per_unit.max(1);
        self
    }

    pub fn with_steps_per_unit(mut self, steps: Option<usize>) -> Self {
        self.steps_per_unit = steps;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > 0.0 && self.x_max.is_finite()) {
            return Err(Error::InvalidGrid("x_max must be positive".into()));
        }
        if self.nx < 3 || self.nx % 2 == 0 {
            return Err(Error::InvalidGrid(format!("nx must be odd and ≥ 3, got {}", self.nx)));
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::InvalidGrid("cfl factor must lie in (0, 1]".into()));
        }
        if self.steps_per_unit == Some(0) {
            return Err(Error::InvalidGrid("steps_per_unit must be positive".into()));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        2.0 * self.x_max / (self.nx - 1) as f64
    }

    pub fn x(&self, j: usize) -> f64 {
        (j as f64 - self.center() as f64) * self.dx()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.nx).map(|j| self.x(j)).collect()
    }

    pub fn center(&self) -> usize {
        self.nx / 2
    }

    /// Step count and step size for an interval of the given length.
    pub fn time_steps(&self, length: f64, band: &VolBand) -> Result<(usize, f64)> {
        self.validate()?;
        let limit = self.dx() * self.dx() / band.hi();
        let steps = match self.steps_per_unit {
            Some(s) => ((length * s as f64).ceil() as usize).max(1),
            None => ((length / (self.cfl * limit)).ceil() as usize).max(1),
        };
        let dt = length / steps as f64;
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, limit });
        }
        Ok((steps, dt))
    }

    /// Locates `x` on the grid: cell index, weight in the cell, and whether it was clamped.
    pub fn locate(&self, x: f64) -> (usize, f64, bool) {
        // Nodes computed as (j − c)·Δx may sit an ulp past ±X_max; do not flag those.
        let edge = self.x_max * (1.0 + 1e-12);
        if x <= -self.x_max {
            return (0, 0.0, x < -edge);
        }
        if x >= self.x_max {
            return (self.nx - 2, 1.0, x > edge);
        }
        let s = (x + self.x_max) / self.dx();
        let j = (s.floor() as usize).min(self.nx - 2);
        (j, (s - j as f64).clamp(0.0, 1.0), false)
    }
}

/// Stored slices of one backward solve.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSlices {
    /// Ascending snapshot times.
    pub times: Vec<f64>,
    /// `times.len() × nx` values, row per snapshot.
    pub values: Vec<f64>,
    pub steps: usize,
    pub dt: f64,
}

/// Solves `−∂_t u − G(∂²u) = 0` backward from `terminal` at `interval.1` to `interval.0`.
pub fn solve_interval(
    terminal: &[f64],
    band: &VolBand,
    grid: &SpaceTimeGrid,
    interval: (f64, f64),
) -> Result<IntervalSlices> {
    let (s, t) = interval;
    if !(t > s) {
        return Err(Error::InvalidArgument(format!("empty interval [{s}, {t}]")));
    }
    let (steps, dt) = grid.time_steps(t - s, band)?;
    let snaps = ((t - s) * grid.snapshots_per_unit as f64).ceil() as usize;
    solve_with_snapshots(terminal, band, grid, interval, steps, dt, snaps.clamp(1, steps))
}

fn solve_with_snapshots(
    terminal: &[f64],
    band: &VolBand,
    grid: &SpaceTimeGrid,
    (s, t): (f64, f64),
    steps: usize,
    dt: f64,
    snaps: usize,
) -> Result<IntervalSlices> {
    if band.dim() != 1 {
        return Err(Error::UnsupportedDimension(band.dim()));
    }
    let nx = grid.nx;
    if terminal.len() != nx {
        return Err(Error::DimensionMismatch {
            expected: nx,
            got: terminal.len(),
        });
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("terminal data".into()));
    }
    let (lo, hi) = (band.lo(), band.hi());
    let inv_dx2 = 1.0 / (grid.dx() * grid.dx());
    // Backward step counts at which a slice is kept.
    let keep: Vec<usize> = (0..=snaps)
        .map(|i| ((i as f64) * steps as f64 / snaps as f64).round() as usize)
        .collect();
    let mut stored: Vec<(usize, Vec<f64>)> = Vec::with_capacity(keep.len());
    let mut u = terminal.to_vec();
    let mut next = u.clone();
    let mut k = 0;
    for m in 0..=steps {
        if keep[k] == m {
            stored.push((m, u.clone()));
            k += 1;
        }
        if m == steps {
            break;
        }
        for j in 1..nx - 1 {
            let d2 = (u[j + 1] - 2.0 * u[j] + u[j - 1]) * inv_dx2;
            next[j] = u[j] + dt * g_scalar(d2, lo, hi);
        }
        next[0] = u[0];
        next[nx - 1] = u[nx - 1];
        std::mem::swap(&mut u, &mut next);
    }
    stored.reverse();
    let times = stored
        .iter()
        .map(|(m, _)| if *m == steps { s } else { t - *m as f64 * dt })
        .collect();
    let values = stored.into_iter().flat_map(|(_, v)| v).collect();
    Ok(IntervalSlices {
        times,
        values,
        steps,
        dt,
    })
}

/// One monitoring interval `[t_{i−1}, t_i)` of a nested solve.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalField {
    pub t_start: f64,
    pub t_end: f64,
    /// Number of frozen path parameters `x_1 … x_{i−1}`.
    pub n_params: usize,
    pub times: Vec<f64>,
    pub steps: usize,
    pub dt: f64,
    /// Layout: `[param (row-major over the spatial grid)][snapshot][space]`.
    data: Vec<f64>,
}

impl IntervalField {
    pub fn n_param_points(&self, nx: usize) -> usize {
        nx.pow(self.n_params as u32)
    }

    /// Spatial slice at a parameter point and snapshot.
    pub fn slice(&self, nx: usize, param: usize, snapshot: usize) -> &[f64] {
        let base = (param * self.times.len() + snapshot) * nx;
        &self.data[base..base + nx]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Which quantity to read from a field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    Value,
    Gradient,
    Hessian,
}

/// An interpolated read; `clamped` is set when any coordinate left the truncation box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Query {
    pub value: f64,
    pub clamped: bool,
}

/// Solved nested field `v_1, …, v_n`.
#[derive(Debug, Clone)]
pub struct ValueField {
    payoff: PayoffSpec,
    band: VolBand,
    grid: SpaceTimeGrid,
    intervals: Vec<IntervalField>,
}

/// Solves `v_n, …, v_1` backward and returns the nested field.
pub fn conditional_expectation(
    payoff: &PayoffSpec,
    band: &VolBand,
    grid: &SpaceTimeGrid,
) -> Result<ValueField> {
    let intervals = solve_nested(payoff.times(), band, grid, &|args: &[f64]| payoff.eval(args))?;
    Ok(ValueField {
        payoff: payoff.clone(),
        band: band.clone(),
        grid: grid.clone(),
        intervals,
    })
}

/// `E^G[f(B_{t1}, …, B_{tn})]` for a terminal function given as a closure.
///
/// Used to re-feed interpolated conditional values as new terminal data.
pub fn g_expectation_of(
    times: &[f64],
    terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
    band: &VolBand,
    grid: &SpaceTimeGrid,
) -> Result<f64> {
    crate::payoff::validate_times(times)?;
    let grid = grid.clone().with_snapshots(1);
    let intervals = solve_nested(times, band, &grid, terminal)?;
    Ok(intervals[0].slice(grid.nx, 0, 0)[grid.center()])
}

fn solve_nested(
    times: &[f64],
    band: &VolBand,
    grid: &SpaceTimeGrid,
    terminal: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<Vec<IntervalField>> {
    if band.dim() != 1 {
        return Err(Error::UnsupportedDimension(band.dim()));
    }
    grid.validate()?;
    let n = times.len();
    if n > crate::payoff::MAX_MONITORING {
        return Err(Error::TooManyMonitoringTimes(n));
    }
    let nx = grid.nx;
    let xs = grid.nodes();
    let mut bounds = vec![0.0];
    bounds.extend_from_slice(times);

    let mut intervals: Vec<IntervalField> = Vec::with_capacity(n);
    for i in (1..=n).rev() {
        let (t0, t1) = (bounds[i - 1], bounds[i]);
        let n_params = i - 1;
        let n_points = nx.pow(n_params as u32);
        let (steps, dt) = grid.time_steps(t1 - t0, band)?;
        let snaps = (((t1 - t0) * grid.snapshots_per_unit as f64).ceil() as usize).clamp(1, steps);
        if n_points * (snaps + 1) * nx > MAX_FIELD_VALUES {
            return Err(Error::InvalidGrid(format!(
                "nested field would hold {} values; reduce nx or snapshots_per_unit",
                n_points * (snaps + 1) * nx
            )));
        }
        let later = intervals.last();
        let terminal_for = |p: usize| -> Vec<f64> {
            let params = unflatten(p, n_params, nx);
            match later {
                None => {
                    let mut args: Vec<f64> = params.iter().map(|&k| xs[k]).collect();
                    args.push(0.0);
                    xs.iter()
                        .map(|&x| {
                            *args.last_mut().unwrap() = x;
                            terminal(&args)
                        })
                        .collect()
                }
                // Diagonal read v_{i+1}(t_i, params, x_j, x_j) at the node itself.
                Some(next) => (0..nx).map(|j| next.slice(nx, p * nx + j, 0)[j]).collect(),
            }
        };
        let solved: Vec<IntervalSlices> = (0..n_points)
            .into_par_iter()
            .map(|p| solve_with_snapshots(&terminal_for(p), band, grid, (t0, t1), steps, dt, snaps))
            .collect::<Result<_>>()?;
        let times = solved[0].times.clone();
        let data = solved.into_iter().flat_map(|s| s.values).collect();
        intervals.push(IntervalField {
            t_start: t0,
            t_end: t1,
            n_params,
            times,
            steps,
            dt,
            data,
        });
    }
    intervals.reverse();
    Ok(intervals)
}

fn unflatten(mut p: usize, n_params: usize, nx: usize) -> Vec<usize> {
    let mut idx = vec![0; n_params];
    for k in (0..n_params).rev() {
        idx[k] = p % nx;
        p /= nx;
    }
    idx
}

/// `E^G[ξ] = v_1(0, 0)`.
pub fn g_expectation(payoff: &PayoffSpec, band: &VolBand, grid: &SpaceTimeGrid) -> Result<f64> {
    // Only the time-zero slice is needed.
    let grid = grid.clone().with_snapshots(1);
    Ok(conditional_expectation(payoff, band, &grid)?.initial_value())
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w == 0.0 {
        a
    } else {
        a + w * (b - a)
    }
}

fn node_quantity(v: &[f64], j: usize, dx: f64, q: Quantity) -> f64 {
    let n = v.len();
    match q {
        Quantity::Value => v[j],
        Quantity::Gradient => {
            if j == 0 {
                (v[1] - v[0]) / dx
            } else if j == n - 1 {
                (v[n - 1] - v[n - 2]) / dx
            } else {
                (v[j + 1] - v[j - 1]) / (2.0 * dx)
            }
        }
        Quantity::Hessian => {
            let c = j.clamp(1, n - 2);
            (v[c + 1] - 2.0 * v[c] + v[c - 1]) / (dx * dx)
        }
    }
}

impl ValueField {
    pub fn payoff(&self) -> &PayoffSpec {
        &self.payoff
    }

    pub fn band(&self) -> &VolBand {
        &self.band
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn intervals(&self) -> &[IntervalField] {
        &self.intervals
    }

    /// `v_1(0, 0)`.
    pub fn initial_value(&self) -> f64 {
        self.intervals[0].slice(self.grid.nx, 0, 0)[self.grid.center()]
    }

    /// Index of the interval holding time `t` (`t = 1` maps to the last one).
    pub fn interval_index(&self, t: f64) -> usize {
        self.intervals
            .iter()
            .position(|iv| t < iv.t_end)
            .unwrap_or(self.intervals.len() - 1)
    }

    /// Reads `v_i`, `∂_x v_i` or `∂²_x v_i` at `(t, B_{t1}, …, B_{t_{i−1}}, x)`.
    ///
    /// `history` holds the path values at the monitoring times already passed;
    /// extra entries are ignored.
    pub fn read(&self, t: f64, history: &[f64], x: f64, q: Quantity) -> Result<Query> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        let iv = &self.intervals[self.interval_index(t)];
        if history.len() < iv.n_params {
            return Err(Error::InvalidArgument(format!(
                "time {t} needs {} past monitoring values, got {}",
                iv.n_params,
                history.len()
            )));
        }
        let nx = self.grid.nx;
        let dx = self.grid.dx();
        let mut clamped = false;
        let cells: Vec<(usize, f64)> = history[..iv.n_params]
            .iter()
            .map(|&h| {
                let (j, w, c) = self.grid.locate(h);
                clamped |= c;
                (j, w)
            })
            .collect();
        let (xj, xw, xc) = self.grid.locate(x);
        clamped |= xc;
        let (tk, tw) = locate_time(&iv.times, t);
        let eval_slice = |p: usize| -> f64 {
            let at = |snap: usize| {
                let v = iv.slice(nx, p, snap);
                lerp(
                    node_quantity(v, xj, dx, q),
                    node_quantity(v, xj + 1, dx, q),
                    xw,
                )
            };
            if tw == 0.0 {
                at(tk)
            } else {
                lerp(at(tk), at(tk + 1), tw)
            }
        };
        fn corners(k: usize, idx: usize, cells: &[(usize, f64)], nx: usize, f: &dyn Fn(usize) -> f64) -> f64 {
            if k == cells.len() {
                return f(idx);
            }
            let (j, w) = cells[k];
            let a = corners(k + 1, idx * nx + j, cells, nx, f);
            if w == 0.0 {
                a
            } else {
                lerp(a, corners(k + 1, idx * nx + j + 1, cells, nx, f), w)
            }
        }
        Ok(Query {
            value: corners(0, 0, &cells, nx, &eval_slice),
            clamped,
        })
    }

    /// `E^G_t[ξ]` along a path history.
    pub fn value_at(&self, t: f64, history: &[f64], x: f64) -> Result<Query> {
        self.read(t, history, x, Quantity::Value)
    }

    /// Node values of the stitched data `u_i(x_1, …, x_{i−1}, x) = v_{i+1}(t_i, …, x, x)`
    /// read at the start of interval `i + 1`, for the diagonal parameter `x_1 = … = x`.
    /// Used to re-feed a conditional value as terminal data.
    pub fn start_slice(&self, interval: usize, param: usize) -> &[f64] {
        self.intervals[interval].slice(self.grid.nx, param, 0)
    }

    /// Writes a columnar CSV: `t, x1…, x, v, dv, d2v`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let n_par = self.intervals.iter().map(|iv| iv.n_params).max().unwrap_or(0);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n_par).map(|k| format!("x{k}")));
        header.extend(["x", "v", "dv", "d2v"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        let nx = self.grid.nx;
        let dx = self.grid.dx();
        let xs = self.grid.nodes();
        for iv in &self.intervals {
            for p in 0..iv.n_param_points(nx) {
                let params = unflatten(p, iv.n_params, nx);
                for (s, t) in iv.times.iter().enumerate() {
                    let v = iv.slice(nx, p, s);
                    for j in 0..nx {
                        let mut row = vec![format!("{t:?}")];
                        row.extend(params.iter().map(|&k| format!("{:?}", xs[k])));
                        row.extend((iv.n_params..n_par).map(|_| String::new()));
                        row.push(format!("{:?}", xs[j]));
                        for q in [Quantity::Value, Quantity::Gradient, Quantity::Hessian] {
                            row.push(format!("{:?}", node_quantity(v, j, dx, q)));
                        }
                        writeln!(out, "{}", row.join(","))?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Binary dump, little-endian:
    ///
    /// ```text
    /// magic  b"GMVF" | version u32 = 1 | n_intervals u32 | nx u32 | x_max f64
    /// per interval: t_start f64 | t_end f64 | n_params u32 | n_times u32 |
    ///               steps u32 | dt f64 | times [f64; n_times] |
    ///               data [f64; nx^n_params · n_times · nx]
    /// ```
    pub fn write_binary<W: Write>(&self, mut out: W) -> io::Result<()> {
        out.write_all(BINARY_MAGIC)?;
        out.write_all(&1u32.to_le_bytes())?;
        out.write_all(&(self.intervals.len() as u32).to_le_bytes())?;
        out.write_all(&(self.grid.nx as u32).to_le_bytes())?;
        out.write_all(&self.grid.x_max.to_le_bytes())?;
        for iv in &self.intervals {
            out.write_all(&iv.t_start.to_le_bytes())?;
            out.write_all(&iv.t_end.to_le_bytes())?;
            out.write_all(&(iv.n_params as u32).to_le_bytes())?;
            out.write_all(&(iv.times.len() as u32).to_le_bytes())?;
            out.write_all(&(iv.steps as u32).to_le_bytes())?;
            out.write_all(&iv.dt.to_le_bytes())?;
            for t in &iv.times {
                out.write_all(&t.to_le_bytes())?;
            }
            for v in &iv.data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads the interval data of a binary dump produced by [`write_binary`](Self::write_binary).
    pub fn read_binary<R: Read>(mut input: R) -> io::Result<(f64, usize, Vec<IntervalField>)> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(bad("bad magic"));
        }
        if read_u32(&mut input)? != 1 {
            return Err(bad("unsupported version"));
        }
        let n_int = read_u32(&mut input)? as usize;
        let nx = read_u32(&mut input)? as usize;
        let x_max = read_f64(&mut input)?;
        let mut intervals = Vec::with_capacity(n_int);
        for _ in 0..n_int {
            let t_start = read_f64(&mut input)?;
            let t_end = read_f64(&mut input)?;
            let n_params = read_u32(&mut input)? as usize;
            let n_times = read_u32(&mut input)? as usize;
            let steps = read_u32(&mut input)? as usize;
            let dt = read_f64(&mut input)?;
            let times = (0..n_times).map(|_| read_f64(&mut input)).collect::<io::Result<_>>()?;
            let len = nx.pow(n_params as u32) * n_times * nx;
            let data = (0..len).map(|_| read_f64(&mut input)).collect::<io::Result<_>>()?;
            intervals.push(IntervalField {
                t_start,
                t_end,
                n_params,
                times,
                steps,
                dt,
                data,
            });
        }
        Ok((x_max, nx, intervals))
    }
}

const BINARY_MAGIC: &[u8; 4] = b"GMVF";

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn locate_time(times: &[f64], t: f64) -> (usize, f64) {
    let n = times.len();
    if n == 1 || t <= times[0] {
        return (0, 0.0);
    }
    if t >= times[n - 1] {
        return (n - 1, 0.0);
    }
    let k = times.partition_point(|&s| s <= t) - 1;
    let w = (t - times[k]) / (times[k + 1] - times[k]);
    (k, w)
}

/// Node-wise gradient and Hessian of every stored slice, same layout as the values.
#[derive(Debug, Clone)]
pub struct DerivativeFields {
    pub gradient: Vec<Vec<f64>>,
    pub hessian: Vec<Vec<f64>>,
}

/// Central differences in the interior, one-sided at the truncation boundary.
pub fn derivatives(field: &ValueField) -> DerivativeFields {
    let nx = field.grid.nx;
    let dx = field.grid.dx();
    let mut gradient = Vec::new();
    let mut hessian = Vec::new();
    for iv in &field.intervals {
        let mut g = Vec::with_capacity(iv.data.len());
        let mut h = Vec::with_capacity(iv.data.len());
        for slice in iv.data.chunks(nx) {
            for j in 0..nx {
                g.push(node_quantity(slice, j, dx, Quantity::Gradient));
                h.push(node_quantity(slice, j, dx, Quantity::Hessian));
            }
        }
        gradient.push(g);
        hessian.push(h);
    }
    DerivativeFields { gradient, hessian }
}

/// One row of a refinement study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRow {
    pub nx: usize,
    pub dx: f64,
    pub value: f64,
    /// Difference to the previous (coarser) row.
    pub diff: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<RefinementRow>,
    /// `log2(|d_{k−1}| / |d_k|)` for consecutive differences; `None` when a difference vanishes.
    pub orders: Vec<Option<f64>>,
}

impl ConvergenceTable {
    /// Order estimated from the finest pair of differences.
    pub fn empirical_order(&self) -> Option<f64> {
        self.orders.last().copied().flatten()
    }
}

/// Solves on successively halved spatial steps and tabulates `E^G[ξ]`.
pub fn refine_study(
    payoff: &PayoffSpec,
    band: &VolBand,
    grids: &[SpaceTimeGrid],
) -> Result<ConvergenceTable> {
    if grids.len() < 3 {
        return Err(Error::InvalidArgument("refinement study needs at least 3 grids".into()));
    }
    for w in grids.windows(2) {
        let ratio = w[0].dx() / w[1].dx();
        if (ratio - 2.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "grids must halve dx, got ratio {ratio}"
            )));
        }
    }
    let mut rows: Vec<RefinementRow> = Vec::new();
    for g in grids {
        let value = g_expectation(payoff, band, g)?;
        let diff = rows.last().map(|r| value - r.value);
        rows.push(RefinementRow {
            nx: g.nx,
            dx: g.dx(),
            value,
            diff,
        });
    }
    let diffs: Vec<f64> = rows.iter().filter_map(|r| r.diff).collect();
    let orders = diffs
        .windows(2)
        .map(|w| (w[0] != 0.0 && w[1] != 0.0).then(|| (w[0].abs() / w[1].abs()).log2()))
        .collect();
    Ok(ConvergenceTable { rows, orders })
}

/// Largest `|v(x_{j+1}) − v(x_j)| / Δx` over all stored slices.
pub fn discrete_lipschitz(field: &ValueField) -> f64 {
    let nx = field.grid.nx;
    let dx = field.grid.dx();
    field
        .intervals
        .iter()
        .flat_map(|iv| iv.data.chunks(nx))
        .flat_map(|v| v.windows(2).map(move |w| (w[1] - w[0]).abs() / dx))
        .fold(0.0, f64::max)
}

/// Largest `|v|` over all stored slices.
pub fn sup_norm(field: &ValueField) -> f64 {
    field
        .intervals
        .iter()
        .flat_map(|iv| iv.data.iter())
        .fold(0.0, |m, v| m.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn band12() -> VolBand {
        VolBand::scalar(1.0, 2.0).unwrap()
    }

    fn grid401() -> SpaceTimeGrid {
        SpaceTimeGrid::new(8.0, 401).unwrap()
    }

    fn terminal(src: &str) -> PayoffSpec {
        PayoffSpec::parse(src, vec![1.0]).unwrap()
    }

    #[test]
    fn solve_interval_closed_forms() {
        let g = grid401();
        let xs = g.nodes();
        let c = g.center();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let up = solve_interval(&sq, &band12(), &g, (0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(up.values[c], 2.0, epsilon = 1e-2);
        let neg: Vec<f64> = xs.iter().map(|x| -x * x).collect();
        let down = solve_interval(&neg, &band12(), &g, (0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(down.values[c], -1.0, epsilon = 1e-2);
        let lin = solve_interval(&xs, &band12(), &g, (0.0, 1.0)).unwrap();
        for (a, b) in lin.values[..g.nx].iter().zip(&xs) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
        assert_eq!(up.times[0], 0.0);
        assert_eq!(*up.times.last().unwrap(), 1.0);
    }

    #[test]
    fn cfl_and_data_errors() {
        let g = grid401().with_steps_per_unit(Some(10));
        let data = vec![0.0; 401];
        assert!(matches!(
            solve_interval(&data, &band12(), &g, (0.0, 1.0)),
            Err(Error::CflViolation { .. })
        ));
        let mut bad = vec![0.0; 401];
        bad[3] = f64::NAN;
        assert!(matches!(
            solve_interval(&bad, &band12(), &grid401(), (0.0, 1.0)),
            Err(Error::NonFinite(_))
        ));
        assert!(SpaceTimeGrid::new(8.0, 400).is_err());
    }

    #[test]
    fn g_expectation_oracles() {
        let b = band12();
        let g = grid401();
        let call = g_expectation(&terminal("call(x1, 0)"), &b, &g).unwrap();
        assert_abs_diff_eq!(call, (2.0 / (2.0 * PI)).sqrt(), epsilon = 1e-2);
        let absn = g_expectation(&terminal("neg(abs(x1))"), &b, &g).unwrap();
        assert_abs_diff_eq!(absn, -(2.0 / PI).sqrt(), epsilon = 1e-2);
        assert_eq!(g_expectation(&terminal("const(3.25)"), &b, &g).unwrap(), 3.25);
    }

    #[test]
    fn nested_independent_increment() {
        let b = band12();
        let g = SpaceTimeGrid::new(8.0, 201).unwrap().with_snapshots(8);
        let p = PayoffSpec::parse("sq(x2 - x1)", vec![0.5, 1.0]).unwrap();
        let f = conditional_expectation(&p, &b, &g).unwrap();
        assert_abs_diff_eq!(f.initial_value(), 1.0, epsilon = 1e-2);
        for h in [-2.0, 0.0, 1.5] {
            let q = f.value_at(0.5, &[h], h).unwrap();
            assert!(!q.clamped);
            assert_abs_diff_eq!(q.value, 1.0, epsilon = 1e-2);
        }
    }

    #[test]
    fn nested_martingale_read() {
        let g = SpaceTimeGrid::new(6.0, 61).unwrap().with_snapshots(8);
        let p = PayoffSpec::parse("x1", vec![0.5, 1.0]).unwrap();
        let f = conditional_expectation(&p, &band12(), &g).unwrap();
        for x in [-1.0, 0.3, 2.0] {
            assert_abs_diff_eq!(f.value_at(0.25, &[], x).unwrap().value, x, epsilon = 1e-12);
            assert_abs_diff_eq!(f.value_at(0.75, &[x], 0.7).unwrap().value, x, epsilon = 1e-12);
        }
    }

    #[test]
    fn three_monitoring_times_and_limits() {
        let g = SpaceTimeGrid::new(4.0, 21).unwrap().with_snapshots(2);
        let p = PayoffSpec::parse("x3 - x1 + const(1)", vec![0.25, 0.5, 1.0]).unwrap();
        let f = conditional_expectation(&p, &band12(), &g).unwrap();
        assert_abs_diff_eq!(f.initial_value(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.value_at(0.75, &[0.4, 1.2], 0.8).unwrap().value, 1.4, epsilon = 1e-12);
        let q = f.value_at(0.75, &[0.0, 0.0], 9.0).unwrap();
        assert!(q.clamped);
        let big = SpaceTimeGrid::new(8.0, 401).unwrap();
        assert!(matches!(
            conditional_expectation(&p, &band12(), &big),
            Err(Error::InvalidGrid(_))
        ));
        let d2 = VolBand::isotropic(2, 1.0, 2.0).unwrap();
        assert!(matches!(
            conditional_expectation(&p, &d2, &g),
            Err(Error::UnsupportedDimension(2))
        ));
    }

    #[test]
    fn derivative_fields() {
        let g = grid401().with_snapshots(4);
        let f = conditional_expectation(&terminal("x1"), &band12(), &g).unwrap();
        let d = derivatives(&f);
        assert!(d.gradient[0].iter().all(|v| (v - 1.0).abs() < 1e-9));
        assert!(d.hessian[0].iter().all(|v| v.abs() < 1e-9));

        let f = conditional_expectation(&terminal("sq(x1)"), &band12(), &g).unwrap();
        let d = derivatives(&f);
        let nx = g.nx;
        for row in d.hessian[0].chunks(nx) {
            for j in 3 * nx / 8..5 * nx / 8 {
                assert_abs_diff_eq!(row[j], 2.0, epsilon = 1e-3);
            }
        }
        let f = conditional_expectation(&terminal("call(x1, 0)"), &band12(), &g).unwrap();
        let delta = f.read(0.0, &[], 0.0, Quantity::Gradient).unwrap().value;
        assert_abs_diff_eq!(delta, 0.5, epsilon = 1e-2);
    }

    #[test]
    fn refinement_tables() {
        let b = band12();
        let grids: Vec<SpaceTimeGrid> = [101, 201, 401]
            .iter()
            .map(|&n| SpaceTimeGrid::new(8.0, n).unwrap())
            .collect();
        let t = refine_study(&terminal("call(x1, 0)"), &b, &grids).unwrap();
        let d: Vec<f64> = t.rows.iter().filter_map(|r| r.diff).collect();
        assert!(d[0].signum() == d[1].signum(), "monotone in refinement: {d:?}");
        assert!(t.empirical_order().unwrap() >= 0.9, "{t:?}");

        let t = refine_study(&terminal("sq(x1)"), &b, &grids).unwrap();
        let d: Vec<f64> = t.rows.iter().filter_map(|r| r.diff).collect();
        // The scheme is exact on quadratics, so differences sit at boundary/rounding level.
        assert!(d[1].abs() * 3.0 <= d[0].abs() || d.iter().all(|x| x.abs() < 1e-8), "{d:?}");

        let t = refine_study(&terminal("const(2) * x1 + const(1)"), &b, &grids).unwrap();
        assert!(t.rows.iter().filter_map(|r| r.diff).all(|x| x.abs() < 1e-12));
        assert!(refine_study(&terminal("x1"), &b, &grids[..2]).is_err());
    }

    #[test]
    fn max_principle_and_lipschitz() {
        let g = SpaceTimeGrid::new(8.0, 201).unwrap().with_snapshots(16);
        for src in ["min(abs(x1), 1)", "clamp(x1, -1, 2)", "min(call(x1, 0.3), 0.7)"] {
            let p = terminal(src);
            let f = conditional_expectation(&p, &band12(), &g).unwrap();
            assert!(sup_norm(&f) <= p.sup_bound().unwrap() + 1e-12);
            assert!(discrete_lipschitz(&f) <= p.lipschitz() + 10.0 * g.dx());
        }
    }

    #[test]
    fn binary_round_trip() {
        let g = SpaceTimeGrid::new(4.0, 21).unwrap().with_snapshots(4);
        let p = PayoffSpec::parse("abs(x2 - x1)", vec![0.5, 1.0]).unwrap();
        let f = conditional_expectation(&p, &band12(), &g).unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        let (x_max, nx, ivs) = ValueField::read_binary(&buf[..]).unwrap();
        assert_eq!((x_max, nx), (4.0, 21));
        assert_eq!(ivs, f.intervals);
        let mut csv = Vec::new();
        f.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("t,x1,x,v,dv,d2v\n"));
    }

    #[test]
    fn default_grid_preserves_affine_data_exactly() {
        let g = SpaceTimeGrid::for_band(&band12());
        assert_eq!(g.nx, 401);
        assert!(g.x_max >= 8.0 * 2f64.sqrt());
        assert_eq!(g.dx(), 0.0625);
        let f = conditional_expectation(&terminal("x1"), &band12(), &g.with_snapshots(4)).unwrap();
        let d = derivatives(&f);
        assert!(d.hessian[0].iter().all(|&h| h == 0.0));
        assert!(d.gradient[0].iter().all(|&h| h == 1.0));
    }
}
