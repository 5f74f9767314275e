//! `gmart`: price, decompose and verify under a volatility band.

mod commands;
mod config;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use commands::Context;
use config::{split_suites, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(#[from] gmart::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("verification breach: {0}")]
    Breach(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Numerical(_) => 2,
            CliError::Breach(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "gmart", version, about)]
struct Cli {
    /// Configuration file; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override `mc.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated suites for `verify`, overriding `verify.suites`.
    #[arg(long, global = true)]
    suite: Option<String>,
    /// Suppress tables on stdout.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Solve the PDE and compare with the dual Monte Carlo bound.
    Price,
    /// Extract the (Y, H, K) decomposition along simulated paths.
    Represent,
    /// Run the inequality suites.
    Verify,
    /// Print the effective configuration.
    Config,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Price => "price",
            Command::Represent => "represent",
            Command::Verify => "verify",
            Command::Config => "config",
        }
    }
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = &cli.suite {
        cfg.suites = split_suites(s);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let started = Instant::now();
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let cfg = load(cli)?;
    if let Command::Config = cli.command {
        let _ = write!(std::io::stdout(), "{}", cfg.emit());
        return Ok(());
    }
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.threads
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    let ctx = Context {
        hash: hex::encode(Sha256::digest(cfg.fingerprint_text().as_bytes())),
        quiet: cli.quiet,
        cfg,
    };
    let result = pool.install(|| match cli.command {
        Command::Price => commands::price(&ctx),
        Command::Represent => commands::represent(&ctx),
        Command::Verify => commands::verify(&ctx, &ctx.cfg.suites),
        Command::Config => unreachable!(),
    });
    let meta = json!({
        "command": cli.command.name(),
        "config_hash": ctx.hash,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": threads,
        "started_unix": started_unix,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
        "exit_code": result.as_ref().err().map_or(0, CliError::exit_code),
    });
    commands::write_meta(&ctx.cfg.out_dir, &meta)?;
    result
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gmart: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
