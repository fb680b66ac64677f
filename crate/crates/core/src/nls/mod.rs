//! Box-constrained nonlinear least squares.

mod linalg;
mod lm;

pub use linalg::solve_spd;
pub use lm::{fd_jacobian, fd_step, lm_solve, signed_step, FnProblem, LmConfig, LmReport, ResidualProblem, Termination};
