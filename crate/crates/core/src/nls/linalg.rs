use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky factorization.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    if !a.is_square() || a.nrows() != b.len() {
        return Err(Error::dimension("SPD system", a.nrows(), b.len()));
    }
    let chol = a.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let x = chol.solve(b);
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::NotPositiveDefinite)
    }
}
