use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::grid::TimeGrid;
use super::profile::PiecewiseConstantProfile;
use crate::error::{Error, Result};

const PSD_TOL: f64 = 1e-10;

/// A symmetric positive-semidefinite weight matrix `W`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMatrix {
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl WeightMatrix {
    pub fn dim(&self) -> usize {
        match self {
            WeightMatrix::Diagonal(d) => d.len(),
            WeightMatrix::Full(m) => m.len(),
        }
    }

    pub fn scaled_identity(n: usize, w: f64) -> Self {
        WeightMatrix::Diagonal(vec![w; n])
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            WeightMatrix::Diagonal(d) => {
                if let Some(v) = d.iter().find(|v| !(**v >= -PSD_TOL) || !v.is_finite()) {
                    return Err(Error::invalid("weight matrix", format!("negative diagonal {v}")));
                }
            }
            WeightMatrix::Full(rows) => {
                let n = rows.len();
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::invalid("weight matrix", "not square"));
                }
                let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
                let scale = m.amax().max(1.0);
                if (&m - m.transpose()).amax() > PSD_TOL * scale {
                    return Err(Error::invalid("weight matrix", "not symmetric"));
                }
                let eig = m.symmetric_eigenvalues();
                if eig.min() < -PSD_TOL * scale {
                    return Err(Error::invalid("weight matrix", "not positive semidefinite"));
                }
            }
        }
        Ok(())
    }

    /// `dᵀ W d`.
    pub fn quad_form(&self, d: &[f64]) -> f64 {
        match self {
            WeightMatrix::Diagonal(w) => w.iter().zip(d).map(|(w, x)| w * x * x).sum(),
            WeightMatrix::Full(m) => m
                .iter()
                .zip(d)
                .map(|(row, di)| di * row.iter().zip(d).map(|(a, b)| a * b).sum::<f64>())
                .sum(),
        }
    }

    /// Factor `L` with `Lᵀ L = W`, so that `‖L d‖² = dᵀ W d`.
    pub fn factor(&self) -> WeightFactor {
        match self {
            WeightMatrix::Diagonal(w) => {
                WeightFactor::Diagonal(w.iter().map(|v| v.max(0.0).sqrt()).collect())
            }
            WeightMatrix::Full(rows) => {
                let n = rows.len();
                let m = DMatrix::from_fn(n, n, |i, j| rows[i][j]);
                let l = match m.clone().cholesky() {
                    // W = C Cᵀ  =>  L = Cᵀ
                    Some(c) => c.l().transpose(),
                    None => {
                        // singular PSD: W = V Λ Vᵀ  =>  L = Λ^½ Vᵀ
                        let e = m.symmetric_eigen();
                        let sqrt_l = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
                        sqrt_l * e.eigenvectors.transpose()
                    }
                };
                WeightFactor::Dense(l)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum WeightFactor {
    Diagonal(Vec<f64>),
    Dense(DMatrix<f64>),
}

impl WeightFactor {
    pub fn apply(&self, d: &[f64], out: &mut [f64]) {
        match self {
            WeightFactor::Diagonal(s) => {
                for ((o, s), d) in out.iter_mut().zip(s).zip(d) {
                    *o = s * d;
                }
            }
            WeightFactor::Dense(l) => {
                let r = l * DVector::from_column_slice(d);
                out.copy_from_slice(r.as_slice());
            }
        }
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match self {
            WeightFactor::Diagonal(s) => DMatrix::from_diagonal(&DVector::from_column_slice(s)),
            WeightFactor::Dense(l) => l.clone(),
        }
    }
}

/// How per-point output weights were (or are to be) derived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WeightModel {
    Identity,
    /// `W = diag(1/σ²)` with `σ = max(frac·|z̃|, sigma_floor)`.
    Relative { frac: f64, sigma_floor: f64 },
    /// `W = diag(1/σ²)` with a fixed per-channel `σ`.
    Absolute { sigma: Vec<f64> },
    Explicit,
}

impl WeightModel {
    pub fn relative(frac: f64) -> Self {
        WeightModel::Relative {
            frac,
            sigma_floor: 1e-6,
        }
    }

    pub fn weights_for(&self, z_meas: &[Vec<f64>]) -> Result<Vec<WeightMatrix>> {
        z_meas
            .iter()
            .map(|z| {
                Ok(match self {
                    WeightModel::Identity => WeightMatrix::scaled_identity(z.len(), 1.0),
                    WeightModel::Relative { frac, sigma_floor } => WeightMatrix::Diagonal(
                        z.iter()
                            .map(|v| {
                                let s = (frac * v.abs()).max(*sigma_floor);
                                1.0 / (s * s)
                            })
                            .collect(),
                    ),
                    WeightModel::Absolute { sigma } => {
                        if sigma.len() != z.len() {
                            return Err(Error::dimension("sigma", z.len(), sigma.len()));
                        }
                        WeightMatrix::Diagonal(sigma.iter().map(|s| 1.0 / (s * s)).collect())
                    }
                    WeightModel::Explicit => {
                        return Err(Error::invalid("weight model", "explicit weights must be supplied"))
                    }
                })
            })
            .collect()
    }
}

/// One experiment: noisy outputs on a measurement grid plus the MV profile applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementDataset {
    pub name: String,
    pub meas_grid: TimeGrid,
    pub z_meas: Vec<Vec<f64>>,
    pub weights: Vec<WeightMatrix>,
    pub weight_model: WeightModel,
    pub mv: PiecewiseConstantProfile,
    pub x0_guess: Vec<f64>,
    pub output_labels: Vec<String>,
    pub mv_labels: Vec<String>,
}

impl MeasurementDataset {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        meas_grid: TimeGrid,
        z_meas: Vec<Vec<f64>>,
        weight_model: WeightModel,
        mv: PiecewiseConstantProfile,
        x0_guess: Vec<f64>,
        output_labels: Vec<String>,
        mv_labels: Vec<String>,
    ) -> Result<Self> {
        let weights = weight_model.weights_for(&z_meas)?;
        Self::with_weights(
            name, meas_grid, z_meas, weights, weight_model, mv, x0_guess, output_labels, mv_labels,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_weights(
        name: impl Into<String>,
        meas_grid: TimeGrid,
        z_meas: Vec<Vec<f64>>,
        weights: Vec<WeightMatrix>,
        weight_model: WeightModel,
        mv: PiecewiseConstantProfile,
        x0_guess: Vec<f64>,
        output_labels: Vec<String>,
        mv_labels: Vec<String>,
    ) -> Result<Self> {
        if z_meas.len() != meas_grid.len() {
            return Err(Error::dimension("measurement rows", meas_grid.len(), z_meas.len()));
        }
        if weights.len() != z_meas.len() {
            return Err(Error::dimension("weight matrices", z_meas.len(), weights.len()));
        }
        let n_z = output_labels.len();
        for (z, w) in z_meas.iter().zip(&weights) {
            if z.len() != n_z {
                return Err(Error::dimension("measurement vector", n_z, z.len()));
            }
            if w.dim() != n_z {
                return Err(Error::dimension("weight matrix", n_z, w.dim()));
            }
            w.validate()?;
        }
        if mv.dim() != mv_labels.len() {
            return Err(Error::dimension("MV profile", mv_labels.len(), mv.dim()));
        }
        if mv.grid().first() > meas_grid.first() || mv.grid().last() < meas_grid.last() {
            return Err(Error::Consistency(
                "MV profile does not cover the measurement horizon".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            meas_grid,
            z_meas,
            weights,
            weight_model,
            mv,
            x0_guess,
            output_labels,
            mv_labels,
        })
    }

    pub fn n_meas(&self) -> usize {
        self.z_meas.len()
    }

    pub fn n_z(&self) -> usize {
        self.output_labels.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_checks() {
        assert!(WeightMatrix::Full(vec![vec![2.0, 1.0], vec![1.0, 2.0]]).validate().is_ok());
        assert!(WeightMatrix::Full(vec![vec![1.0, 0.0], vec![0.0, 0.0]]).validate().is_ok());
        assert!(WeightMatrix::Full(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).validate().is_err());
        assert!(WeightMatrix::Full(vec![vec![1.0, 0.5], vec![0.0, 1.0]]).validate().is_err());
        assert!(WeightMatrix::Diagonal(vec![1.0, -1.0]).validate().is_err());
    }

    #[test]
    fn factor_reproduces_quadratic_form() {
        let d = [0.3, -1.2];
        for w in [
            WeightMatrix::Full(vec![vec![2.0, 1.0], vec![1.0, 2.0]]),
            WeightMatrix::Full(vec![vec![1.0, 1.0], vec![1.0, 1.0]]),
            WeightMatrix::Diagonal(vec![0.25, 4.0]),
        ] {
            let mut r = [0.0; 2];
            w.factor().apply(&d, &mut r);
            let lhs = r[0] * r[0] + r[1] * r[1];
            assert!((lhs - w.quad_form(&d)).abs() < 1e-12, "{w:?}");
        }
    }

    #[test]
    fn relative_weights_use_floor() {
        let w = WeightModel::relative(0.02).weights_for(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(w[0], WeightMatrix::Diagonal(vec![1.0 / (0.02f64 * 0.02), 1e12]));
    }
}
