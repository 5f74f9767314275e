//! The `price`, `represent` and `verify` commands.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use gmart::gfun::{default_gamma_truncation, legendre, mollify, sandwich_check, DEFAULT_QUADRATURE_NODES};
use gmart::gpde::{conditional_expectation, g_expectation, refine_study, ConvergenceTable, SpaceTimeGrid};
use gmart::qsmc::{dual_value, simulate, ControlFamily, McSettings};
use gmart::represent::{extract, gmartingale_gap, is_symmetric, monotonicity, residual};
use gmart::rng::sub_seed;
use gmart::validate::{
    apriori_check, bdg_check, difference_check, doob_check, render_table, tower_check, HSpec, InequalityReport, Slack,
};
use gmart::PayoffSpec;

use crate::config::RunConfig;
use crate::CliError;

/// Everything a command needs.
pub struct Context {
    pub cfg: RunConfig,
    /// Hex SHA-256 of the canonical effective configuration.
    pub hash: String,
    pub quiet: bool,
}

impl Context {
    fn family(&self) -> Result<ControlFamily, CliError> {
        let band = self.cfg.band()?;
        let mut fam = ControlFamily::constant_grid(&band, self.cfg.constant_controls)?;
        if self.cfg.piecewise_controls > 0 {
            fam = fam.with_random_piecewise(
                &band,
                self.cfg.pieces,
                self.cfg.piecewise_controls,
                sub_seed(self.cfg.seed, "family"),
            )?;
        }
        Ok(fam)
    }

    fn mc(&self) -> McSettings {
        McSettings {
            n_paths: self.cfg.paths,
            steps: self.cfg.steps,
            seed: self.cfg.seed,
        }
    }

    fn out(&self, name: &str) -> Result<BufWriter<fs::File>, CliError> {
        fs::create_dir_all(&self.cfg.out_dir)?;
        Ok(BufWriter::new(fs::File::create(self.cfg.out_dir.join(name))?))
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut v = serde_json::to_value(value).expect("outputs serialise");
        if let Value::Object(map) = &mut v {
            map.insert("config_hash".into(), Value::String(self.hash.clone()));
        }
        let mut w = self.out(name)?;
        serde_json::to_writer_pretty(&mut w, &v).expect("outputs serialise");
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn say(&self, msg: &str) {
        if !self.quiet {
            // A closed pipe (e.g. `| head`) is not an error for a report.
            let _ = writeln!(std::io::stdout(), "{msg}");
        }
    }
}

/// Grids with `Δx`, `Δx/2` and the configured `Δx/4` spacing, when `nx − 1` allows it.
fn refinement_grids(grid: &SpaceTimeGrid) -> Option<Vec<SpaceTimeGrid>> {
    let cells = grid.nx - 1;
    if cells % 8 != 0 {
        return None;
    }
    [cells / 4, cells / 2, cells]
        .iter()
        .map(|c| SpaceTimeGrid::new(grid.x_max, c + 1).ok())
        .collect()
}

#[derive(Serialize)]
struct PriceOutput {
    payoff: String,
    times: Vec<f64>,
    band: [f64; 2],
    value: f64,
    dual: gmart::qsmc::DualValue,
    gap: f64,
    convergence: Option<ConvergenceTable>,
}

pub fn price(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let band = cfg.band()?;
    let payoff = cfg.payoff()?;
    let grid = cfg.grid()?;
    let value = g_expectation(&payoff, &band, &grid)?;
    let dual = dual_value(&payoff, &ctx.family()?, cfg.paths, cfg.steps, cfg.seed)?;
    let convergence = match refinement_grids(&grid) {
        Some(grids) => Some(refine_study(&payoff, &band, &grids)?),
        None => None,
    };
    let out = PriceOutput {
        payoff: payoff.expr().to_string(),
        times: payoff.times().to_vec(),
        band: [band.lo(), band.hi()],
        value,
        gap: value - dual.value,
        dual,
        convergence,
    };
    ctx.write_json("price.json", &out)?;
    ctx.say(&format!(
        "E^G[ξ] = {:.6}  dual lower bound = {:.6} ± {:.1e} ({})",
        out.value, out.dual.value, out.dual.std_err, out.dual.argmax_label
    ));
    // The dual estimate is a lower bound; exceeding the PDE value is a breach.
    let excess = out.dual.value - out.value;
    if excess > cfg.grid_tol + 2.0 * out.dual.std_err {
        return Err(CliError::Breach(format!(
            "dual estimate exceeds the PDE value by {excess:.4}"
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct ControlRow {
    label: String,
    residual_rms: f64,
    residual_max: f64,
    min_dk: f64,
    excluded_paths: usize,
}

pub fn represent(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let band = cfg.band()?;
    let payoff = cfg.payoff()?;
    let field = conditional_expectation(&payoff, &band, &cfg.grid()?)?;
    let family = ctx.family()?;
    let gap = gmartingale_gap(&field, &family, cfg.paths, cfg.steps, cfg.seed)?;
    let path_seed = sub_seed(cfg.seed, "represent");
    let mut rows = Vec::new();
    let mut chosen = None;
    for (i, (control, label)) in family.controls().iter().zip(family.labels()).enumerate() {
        let bundle = simulate(control, cfg.decomposition_paths, cfg.steps, path_seed)?;
        let dec = extract(&field, &bundle)?;
        let r = residual(&dec);
        rows.push(ControlRow {
            label: label.clone(),
            residual_rms: r.rms,
            residual_max: r.max,
            min_dk: monotonicity(&dec),
            excluded_paths: r.excluded,
        });
        if i == gap.argmax {
            chosen = Some(dec);
        }
    }
    let dec = chosen.expect("argmax indexes the family");
    let mut w = ctx.out("decomposition.csv")?;
    writeln!(w, "# config_hash={} control={}", ctx.hash, gap.argmax_label)?;
    dec.write_csv(&mut w)?;
    w.flush()?;

    let symmetry = is_symmetric(&field, &family, cfg.decomposition_paths, cfg.steps, cfg.seed, 1e-8)?;
    let min_dk = rows.iter().map(|r| r.min_dk).fold(0.0, f64::min);
    let summary = json!({
        "value": field.initial_value(),
        "controls": rows,
        "min_dk": min_dk,
        "gap": gap,
        "symmetry": symmetry,
        "decomposition_control": gap.argmax_label,
    });
    ctx.write_json("summary.json", &summary)?;
    let mut table = format!("{:<24} {:>12} {:>12} {:>12}\n", "control", "residual rms", "min dK", "E[-K1]");
    for (r, g) in rows.iter().zip(&gap.table) {
        table += &format!(
            "{:<24} {:>12.5} {:>12.2e} {:>12.5}\n",
            r.label, r.residual_rms, r.min_dk, g.minus_k.mean
        );
    }
    table += &format!(
        "sup E[-K1] = {:.5} at {}; symmetric = {} (K-max {:.2e}, E[ξ]+E[-ξ] = {:.5})",
        gap.sup, gap.argmax_label, symmetry.symmetric, symmetry.k_max, symmetry.mean_gap
    );
    ctx.say(&table);
    if min_dk < -1e-6 {
        return Err(CliError::Breach(format!("K decreases by {min_dk:.2e}")));
    }
    if gap.sup > cfg.grid_tol + 2.0 * gap.std_err {
        return Err(CliError::Breach(format!("sup E[-K1] = {:.4} is positive", gap.sup)));
    }
    Ok(())
}

fn tower_reports(ctx: &Context, payoff: &PayoffSpec) -> Result<Vec<InequalityReport>, CliError> {
    let cfg = &ctx.cfg;
    let band = cfg.band()?;
    let grid = cfg.grid()?;
    let inner_times: Vec<f64> = payoff.times().iter().copied().filter(|&t| t < 1.0).collect();
    if inner_times.is_empty() {
        // Condition a terminal payoff at t = ½ by re-reading it as a two-time payoff.
        let lifted = PayoffSpec::parse(&cfg.expr.replace("x1", "x2"), vec![0.5, 1.0])
            .map_err(|e| CliError::Config(e.to_string()))?;
        return Ok(vec![tower_check(&lifted, &band, &grid, 0.5, cfg.grid_tol)?]);
    }
    inner_times
        .into_iter()
        .map(|t| Ok(tower_check(payoff, &band, &grid, t, cfg.grid_tol)?))
        .collect()
}

fn mollify_reports(ctx: &Context) -> Result<Vec<InequalityReport>, CliError> {
    let band = ctx.cfg.band()?;
    let gamma_grid: Vec<f64> = (-200..=200).map(|i| i as f64 * 0.05).collect();
    let mut reports = Vec::new();
    let mut ratios = Vec::new();
    for &eps in &ctx.cfg.epsilons {
        let g = mollify(&band, eps, DEFAULT_QUADRATURE_NODES)?;
        let min_excess = gamma_grid.iter().map(|&x| g.excess(x)).fold(f64::INFINITY, f64::min);
        reports.push(InequalityReport::new(&format!("mollify-sandwich eps={eps}"), -min_excess, 0.0, None, 0.0, vec![]));
        ratios.push(sandwich_check(&g, &gamma_grid)? / eps);
        let (mut worst_low, mut worst_high) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for i in 0..=20 {
            let a = g.lower_eps() + (g.upper() - g.lower_eps()) * i as f64 / 20.0;
            let l = legendre(&g, a, default_gamma_truncation(a), 2001)?;
            worst_low = worst_low.max(-l / eps);
            worst_high = worst_high.max(l);
        }
        reports.push(
            // Equality holds at the band endpoints; allow only rounding.
            InequalityReport::new(
                &format!("legendre-lower eps={eps}"),
                worst_low,
                g.cstar(),
                Some(g.cstar()),
                1e-12 * g.cstar(),
                vec![],
            ),
        );
        reports.push(InequalityReport::new(&format!("legendre-upper eps={eps}"), worst_high, 0.0, None, 0.0, vec![]));
    }
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    reports.push(
        InequalityReport::new("mollify-ratio-spread", (hi - lo) / lo, 0.25, None, 0.0, vec![])
            .with_detail("min_ratio", lo)
            .with_detail("max_ratio", hi),
    );
    Ok(reports)
}

fn bounded_h(t: f64, x: f64) -> f64 {
    x.tanh() * (1.0 + t).cos()
}

pub fn verify(ctx: &Context, suites: &[String]) -> Result<(), CliError> {
    if suites.is_empty() {
        return Err(CliError::Config("no verification suite selected".into()));
    }
    let cfg = &ctx.cfg;
    let band = cfg.band()?;
    let payoff = cfg.payoff()?;
    let grid = cfg.grid()?;
    let family = ctx.family()?;
    let mc = ctx.mc();
    let slack = Slack {
        grid_tol: cfg.grid_tol,
        se_mult: 2.0,
    };
    let mut reports = Vec::new();
    for suite in suites {
        match suite.as_str() {
            "bdg" => {
                for h in [HSpec::Constant(1.0), HSpec::Before(0.5), HSpec::Function("tanh(x)cos(1+t)", bounded_h)] {
                    reports.extend(bdg_check(h, &family, mc, slack)?);
                }
            }
            "apriori" => {
                let field = conditional_expectation(&payoff, &band, &grid)?;
                reports.push(apriori_check(&field, &family, mc)?);
            }
            "difference" => {
                let f1 = conditional_expectation(&payoff, &band, &grid)?;
                let f2 = conditional_expectation(&payoff.scaled(0.9), &band, &grid)?;
                reports.extend(difference_check(&f1, &f2, &family, mc, cfg.cstar, slack)?);
            }
            "tower" => reports.extend(tower_reports(ctx, &payoff)?),
            "doob" => {
                let field = conditional_expectation(&payoff.abs(), &band, &grid)?;
                reports.push(doob_check(&field, cfg.doob_p, &family, mc, slack)?);
            }
            "mollify" => reports.extend(mollify_reports(ctx)?),
            other => return Err(CliError::Config(format!("unknown suite `{other}`"))),
        }
    }
    write_reports(ctx, &reports)?;
    ctx.say(&render_table(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Breach(format!("failed: {}", failed.join(", "))))
    }
}

fn write_reports(ctx: &Context, reports: &[InequalityReport]) -> Result<(), CliError> {
    let mut w = ctx.out("reports.jsonl")?;
    for r in reports {
        let mut v = serde_json::to_value(r).expect("reports serialise");
        if let Value::Object(map) = &mut v {
            map.insert("config_hash".into(), Value::String(ctx.hash.clone()));
        }
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar with the non-reproducible fields (timestamps, elapsed time).
pub fn write_meta(out_dir: &Path, meta: &Value) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)?;
    let mut w = BufWriter::new(fs::File::create(out_dir.join("meta.json"))?);
    serde_json::to_writer_pretty(&mut w, meta).expect("meta serialises");
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
