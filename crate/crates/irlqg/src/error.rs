//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid problem: {0}")]
    Validation(String),

    #[error("parse error in {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("matrix is not positive semi-definite: {0}")]
    NotPsd(String),

    #[error("finite escape in {flow} at t = {t:.6}: norm {norm:.3e} exceeds cap")]
    FiniteEscape { flow: &'static str, t: f64, norm: f64 },

    #[error("rank of R inconsistent along the grid: {0}")]
    RankInconsistent(String),

    #[error("P1 terminal value not found; supply p1_terminal")]
    P1TerminalNotFound,

    #[error("problem is not solvable: {0}")]
    Unsolvable(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
