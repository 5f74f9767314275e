//! Run configuration: a flat key-value file with sections.
//!
//! ```text
//! [band]
//! lower = 1.0
//! upper = 2.0
//!
//! [payoff]
//! expr = sq(x1)
//! times = 1.0
//! ```
//!
//! Every key has a default; unknown sections or keys are rejected.

use std::path::PathBuf;

use gmart::gpde::SpaceTimeGrid;
use gmart::qsmc::grid_index;
use gmart::{PayoffSpec, VolBand};

use crate::CliError;

pub const SUITES: [&str; 6] = ["bdg", "apriori", "difference", "tower", "doob", "mollify"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub lower: f64,
    pub upper: f64,
    pub expr: String,
    pub times: Vec<f64>,
    pub nx: usize,
    pub x_max: f64,
    pub snapshots_per_unit: usize,
    /// Explicit PDE steps per unit time; 0 derives them from the CFL bound.
    pub pde_steps_per_unit: usize,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub decomposition_paths: usize,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub constant_controls: usize,
    pub piecewise_controls: usize,
    pub pieces: usize,
    pub suites: Vec<String>,
    pub doob_p: f64,
    pub cstar: f64,
    pub epsilons: Vec<f64>,
    pub grid_tol: f64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lower: 1.0,
            upper: 2.0,
            expr: "sq(x1)".into(),
            times: vec![1.0],
            nx: 401,
            x_max: 8.0,
            snapshots_per_unit: 256,
            pde_steps_per_unit: 0,
            paths: 20_000,
            steps: 64,
            seed: 42,
            decomposition_paths: 200,
            threads: 0,
            constant_controls: 9,
            piecewise_controls: 0,
            pieces: 4,
            suites: SUITES.iter().map(|s| s.to_string()).collect(),
            doob_p: 4.0,
            cstar: 1.0,
            epsilons: vec![0.1, 0.05, 0.025],
            grid_tol: 1e-2,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ")
}

impl RunConfig {
    /// Canonical text form; `parse(emit(c)) == c`.
    pub fn emit(&self) -> String {
        format!(
            "[band]\nlower = {:?}\nupper = {:?}\n\n\
             [payoff]\nexpr = {}\ntimes = {}\n\n\
             [grid]\nnx = {}\nx_max = {:?}\nsnapshots_per_unit = {}\nsteps_per_unit = {}\n\n\
             [mc]\npaths = {}\nsteps = {}\nseed = {}\ndecomposition_paths = {}\nthreads = {}\n\n\
             [family]\nconstant = {}\npiecewise = {}\npieces = {}\n\n\
             [verify]\nsuites = {}\ndoob_p = {:?}\ncstar = {:?}\nepsilons = {}\ngrid_tol = {:?}\n\n\
             [output]\ndir = {}\n",
            self.lower,
            self.upper,
            self.expr,
            list(&self.times),
            self.nx,
            self.x_max,
            self.snapshots_per_unit,
            self.pde_steps_per_unit,
            self.paths,
            self.steps,
            self.seed,
            self.decomposition_paths,
            self.threads,
            self.constant_controls,
            self.piecewise_controls,
            self.pieces,
            self.suites.join(","),
            self.doob_p,
            self.cstar,
            list(&self.epsilons),
            self.grid_tol,
            self.out_dir.display(),
        )
    }

    /// Text hashed into the run fingerprint: every key that can change a result,
    /// so the output directory is left out.
    pub fn fingerprint_text(&self) -> String {
        let text = self.emit();
        let cut = text.find("[output]").expect("emit writes an output section");
        text[..cut].to_string()
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut c = RunConfig::default();
        let mut section = String::new();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| CliError::Config(format!("line {}: {msg}", no + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (key, value) = (key.trim(), value.trim());
            let full = format!("{section}.{key}");
            if !seen.insert(full.clone()) {
                return Err(err(format!("duplicate key `{full}`")));
            }
            let num = |v: &str| v.parse::<f64>().map_err(|_| err(format!("`{full}`: not a number: `{v}`")));
            let int = |v: &str| v.parse::<usize>().map_err(|_| err(format!("`{full}`: not a count: `{v}`")));
            let nums = |v: &str| {
                v.split(|ch: char| ch.is_whitespace() || ch == ',')
                    .filter(|t| !t.is_empty())
                    .map(num)
                    .collect::<Result<Vec<f64>, _>>()
            };
            match full.as_str() {
                "band.lower" => c.lower = num(value)?,
                "band.upper" => c.upper = num(value)?,
                "payoff.expr" => c.expr = value.to_string(),
                "payoff.times" => c.times = nums(value)?,
                "grid.nx" => c.nx = int(value)?,
                "grid.x_max" => c.x_max = num(value)?,
                "grid.snapshots_per_unit" => c.snapshots_per_unit = int(value)?,
                "grid.steps_per_unit" => c.pde_steps_per_unit = int(value)?,
                "mc.paths" => c.paths = int(value)?,
                "mc.steps" => c.steps = int(value)?,
                "mc.seed" => {
                    c.seed = value
                        .parse()
                        .map_err(|_| err(format!("`{full}`: not a u64: `{value}`")))?
                }
                "mc.decomposition_paths" => c.decomposition_paths = int(value)?,
                "mc.threads" => c.threads = int(value)?,
                "family.constant" => c.constant_controls = int(value)?,
                "family.piecewise" => c.piecewise_controls = int(value)?,
                "family.pieces" => c.pieces = int(value)?,
                "verify.suites" => c.suites = split_suites(value),
                "verify.doob_p" => c.doob_p = num(value)?,
                "verify.cstar" => c.cstar = num(value)?,
                "verify.epsilons" => c.epsilons = nums(value)?,
                "verify.grid_tol" => c.grid_tol = num(value)?,
                "output.dir" => c.out_dir = PathBuf::from(value),
                _ => return Err(err(format!("unknown key `{full}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Re-checks every numeric constraint of the engine.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.band()?;
        let payoff = self.payoff()?;
        self.grid()?;
        if self.steps == 0 || self.paths == 0 || self.decomposition_paths == 0 {
            return bad("mc.paths, mc.steps and mc.decomposition_paths must be positive".into());
        }
        for &t in payoff.times() {
            grid_index(t, self.steps)
                .map_err(|_| CliError::Config(format!("monitoring time {t} is not a multiple of 1/mc.steps")))?;
        }
        if self.constant_controls == 0 {
            return bad("family.constant must be at least 1".into());
        }
        if self.piecewise_controls > 0 && self.pieces == 0 {
            return bad("family.pieces must be positive".into());
        }
        if let Some(s) = self.suites.iter().find(|s| !SUITES.contains(&s.as_str())) {
            return bad(format!("unknown suite `{s}`; known: {}", SUITES.join(",")));
        }
        if !(self.doob_p > 2.0) {
            return bad("verify.doob_p must exceed 2".into());
        }
        if !(self.cstar > 0.0) || !(self.grid_tol >= 0.0) {
            return bad("verify.cstar must be positive and verify.grid_tol non-negative".into());
        }
        if self.epsilons.is_empty() || self.epsilons.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return bad("verify.epsilons must lie in (0, 1]".into());
        }
        Ok(())
    }

    pub fn band(&self) -> Result<VolBand, CliError> {
        VolBand::scalar(self.lower, self.upper).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn payoff(&self) -> Result<PayoffSpec, CliError> {
        PayoffSpec::parse(&self.expr, self.times.clone()).map_err(|e| CliError::Config(format!("payoff: {e}")))
    }

    pub fn grid(&self) -> Result<SpaceTimeGrid, CliError> {
        Ok(SpaceTimeGrid::new(self.x_max, self.nx)
            .map_err(|e| CliError::Config(e.to_string()))?
            .with_snapshots(self.snapshots_per_unit)
            .with_steps_per_unit((self.pde_steps_per_unit > 0).then_some(self.pde_steps_per_unit)))
    }
}

pub fn split_suites(s: &str) -> Vec<String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
    }

    #[test]
    fn edited_config_round_trips() {
        let mut c = RunConfig::default();
        c.expr = "min(abs(x2), 1) - x1".into();
        c.times = vec![0.5, 1.0];
        c.lower = 0.1;
        c.epsilons = vec![0.3, 0.01];
        c.suites = vec!["tower".into()];
        c.seed = u64::MAX;
        assert_eq!(RunConfig::parse(&c.emit()).unwrap(), c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(RunConfig::parse("[band]\nlow = 1\n"), Err(CliError::Config(_))));
        assert!(RunConfig::parse("[band]\nlower = 3\n").is_err());
        assert!(RunConfig::parse("[grid]\nnx = 400\n").is_err());
        assert!(RunConfig::parse("[payoff]\ntimes = 0.3 1\nexpr = x1\n").is_err());
        assert!(RunConfig::parse("[verify]\nsuites = bdg,nope\n").is_err());
        assert!(RunConfig::parse("[band]\nlower = 1\nlower = 1\n").is_err());
        assert!(RunConfig::parse("[payoff]\nexpr = sq(x1\n").is_err());
    }

    #[test]
    fn fingerprint_ignores_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint_text(), b.fingerprint_text());
        b.seed += 1;
        assert_ne!(a.fingerprint_text(), b.fingerprint_text());
    }

    #[test]
    fn comments_and_partial_files() {
        let c = RunConfig::parse("# header\n[mc]\nseed = 7 # inline\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.nx, 401);
    }
}
