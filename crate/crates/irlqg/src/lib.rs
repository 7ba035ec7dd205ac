//! Finite-horizon LQG toolkit for irregular (singular-weight) problems.
//!
//! Classic LQ synthesis assumes the stationarity equation `R u + B'P x = 0`
//! can be solved for the control, which fails when `Range(B'P) ⊄ Range(R)`.
//! This crate handles that *irregular* regime for output-feedback problems
//! with additive noise, where the terminal cost must penalize the mean of
//! the state, `(E x(T))' H (E x(T))`, for the problem to be solvable at all.
//!
//! The pipeline:
//!
//! * [`problem`] — problem data model, validation, JSON ingestion;
//! * [`matrixkit`] — pseudoinverse, range tests, the structural
//!   factorizations;
//! * [`riccati`] — the two Riccati flows, the filter covariance, the
//!   transition family and the Gramian;
//! * [`classifier`] — the regular/irregular dichotomy and derived operators;
//! * [`solver`] — controller synthesis (open-loop, closed-loop, classic) and
//!   residual verification;
//! * [`kalman`] — per-trial filtering;
//! * [`simulator`] — Monte Carlo validation of costs, the separation
//!   structure, and the terminal constraint.
//!
//! ```
//! use irlqg::prelude::*;
//!
//! // the scalar demonstration problem: dx = u dt + dw, J = (E x(T))^2
//! let spec = ProblemSpec::intro_scalar(1.0, 500);
//! let synth = synthesize(&spec, SynthesisMode::Open, &SolverOptions::default())?;
//! let SynthesisBranch::Irregular(ir) = &synth.branch else { unreachable!() };
//! let open = ir.open_loop.as_ref().unwrap();
//! // the constant pull u = -x0 / T, with zero optimal cost
//! assert!((open.u_schedule[0][0] + 1.0).abs() < 1e-9);
//! assert!(open.optimal_cost_deterministic.abs() < 1e-12);
//! # Ok::<(), irlqg::Error>(())
//! ```

pub mod classifier;
mod error;
pub mod kalman;
pub mod matrixkit;
pub mod problem;
pub mod riccati;
pub mod simulator;
pub mod solver;

pub use error::Error;

/// The names most call sites need.
pub mod prelude {
    pub use crate::classifier::{classify, derive_operators, DerivedOperators, RegularityReport};
    pub use crate::error::Error;
    pub use crate::kalman::{error_covariance_check, step_filter, FilterCovarianceSolution};
    pub use crate::matrixkit::DEFAULT_TOL;
    pub use crate::problem::{
        load_problem, save_problem, validate, MatrixSchedule, ProblemSpec, TimeGrid,
    };
    pub use crate::riccati::{
        gramian_g1, solve_filter_covariance, solve_p, solve_p1, transition_p2,
    };
    pub use crate::simulator::{
        demo_intro, run_monte_carlo, Controller, SimConfig, SimResult,
    };
    pub use crate::solver::{
        check_solvability, fbde_residuals, optimal_lqg_cost, resolve_p1_terminal,
        solve_closed_loop, solve_open_loop, solve_regular, synthesize, ClosedLoopSolution,
        OpenLoopSolution, RegularSolution, SolverOptions, Synthesis, SynthesisBranch,
        SynthesisMode,
    };
}

pub use prelude::*;
