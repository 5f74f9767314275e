//! Sublinear expectations under volatility uncertainty.
//!
//! The crate evaluates the nonlinear generator `G`, solves the nested
//! nonlinear heat equation for cylinder payoffs, estimates the dual
//! supremum over volatility controls by Monte Carlo, extracts the
//! martingale decomposition along simulated paths and checks the
//! associated norm inequalities.

pub mod error;
pub mod gfun;
pub mod gpde;
pub mod payoff;
pub mod qsmc;
pub mod represent;
pub mod rng;
pub mod validate;

pub use error::{Error, Result};
pub use gfun::{eval_g, g_scalar, mollify, SmoothG, SymMat, VolBand};
pub use gpde::{conditional_expectation, g_expectation, SpaceTimeGrid, ValueField};
pub use payoff::{Expr, PayoffSpec};
pub use rng::Estimate;
