//! Incremental identification of dynamic hybrid models.
//!
//! The crate follows four decoupled stages:
//!
//! 1. [`estimate`]: regularized single-shooting estimation of piecewise-constant
//!    flux profiles, one solve per dataset.
//! 2. [`analyze`]: a flux table of (state, MV, flux) records and Pearson screening
//!    of candidate inputs.
//! 3. [`mlp`]: small feedforward networks trained to map the selected inputs to
//!    each flux.
//! 4. [`hybrid`]: re-assembly of the mechanistic structure with the trained maps,
//!    simulation and scoring against the datasets.
//!
//! [`mpc`] embeds a hybrid model as the prediction model of a receding-horizon
//! controller; [`sim`] provides the integrators and the CSTR and three-tank
//! ground-truth simulators; [`nls`] holds the Levenberg–Marquardt solver used by
//! both the estimator and the controller; [`cli`] wires the stages into
//! file-based pipeline runs.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod cli;
pub mod error;
pub mod estimate;
pub mod hybrid;
pub mod mlp;
pub mod model;
pub mod mpc;
pub mod nls;
pub mod sim;

pub use error::{Error, Result};
