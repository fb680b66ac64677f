use serde::{Deserialize, Serialize};

use super::grid::{TimeGrid, TimeUnit};
use crate::error::{Error, Result};

/// One constant vector per grid interval. Used for manipulated variables and
/// for flux profiles alike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile", into = "RawProfile")]
pub struct PiecewiseConstantProfile {
    grid: TimeGrid,
    values: Vec<Vec<f64>>,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
struct RawProfile {
    grid: TimeGrid,
    values: Vec<Vec<f64>>,
}

impl TryFrom<RawProfile> for PiecewiseConstantProfile {
    type Error = Error;
    fn try_from(raw: RawProfile) -> Result<Self> {
        Self::new(raw.grid, raw.values)
    }
}

impl From<PiecewiseConstantProfile> for RawProfile {
    fn from(p: PiecewiseConstantProfile) -> Self {
        RawProfile {
            grid: p.grid,
            values: p.values,
        }
    }
}

impl PiecewiseConstantProfile {
    pub fn new(grid: TimeGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != grid.n_intervals() {
            return Err(Error::dimension(
                "profile intervals",
                grid.n_intervals(),
                values.len(),
            ));
        }
        let dim = values[0].len();
        if let Some(v) = values.iter().find(|v| v.len() != dim) {
            return Err(Error::dimension("profile value", dim, v.len()));
        }
        Ok(Self { grid, values, dim })
    }

    /// The same vector on every interval of `grid`.
    pub fn constant(grid: TimeGrid, value: Vec<f64>) -> Self {
        let values = vec![value; grid.n_intervals()];
        let dim = values[0].len();
        Self { grid, values, dim }
    }

    /// Builds a profile from a flat, interval-major slice.
    pub fn from_flat(grid: TimeGrid, dim: usize, flat: &[f64]) -> Result<Self> {
        if dim == 0 || flat.len() != dim * grid.n_intervals() {
            return Err(Error::dimension(
                "flat profile",
                dim * grid.n_intervals(),
                flat.len(),
            ));
        }
        let values = flat.chunks(dim).map(<[f64]>::to_vec).collect();
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn unit(&self) -> TimeUnit {
        self.grid.unit()
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_intervals(&self) -> usize {
        self.values.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }

    pub fn eval(&self, t: f64) -> Result<&[f64]> {
        Ok(&self.values[self.grid.interval_of(t)?])
    }

    /// Interval values for a sub-span; knots are clipped to `[start, end]`.
    pub fn restrict(&self, start: f64, end: f64) -> Result<Self> {
        let grid = TimeGrid::union(&[&self.grid], start, end)?;
        let values = grid
            .midpoints()
            .into_iter()
            .map(|m| self.eval(m).map(<[f64]>::to_vec))
            .collect::<Result<Vec<_>>>()?;
        Self::new(grid, values)
    }

    /// Sum over `i` of `|p_{k+1,i} - p_{k,i}|`, summed over adjacent intervals.
    pub fn total_variation(&self) -> f64 {
        self.values
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).abs()).sum::<f64>())
            .sum()
    }

    /// Time-weighted average per component.
    pub fn mean(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.dim];
        for (w, v) in self.grid.points().windows(2).zip(&self.values) {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += x * (w[1] - w[0]);
            }
        }
        let span = self.grid.span();
        acc.iter_mut().for_each(|a| *a /= span);
        acc
    }
}

/// Free-function form of [`PiecewiseConstantProfile::eval`].
pub fn profile_eval(profile: &PiecewiseConstantProfile, t: f64) -> Result<Vec<f64>> {
    profile.eval(t).map(<[f64]>::to_vec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_step() -> PiecewiseConstantProfile {
        let grid = TimeGrid::new(vec![0.0, 1.0, 2.0], TimeUnit::Seconds).unwrap();
        PiecewiseConstantProfile::new(grid, vec![vec![5.0], vec![7.0]]).unwrap()
    }

    #[test]
    fn eval_examples() {
        let p = two_step();
        assert_eq!(profile_eval(&p, 0.5).unwrap(), vec![5.0]);
        assert_eq!(profile_eval(&p, 1.0).unwrap(), vec![7.0]);
        assert_eq!(profile_eval(&p, 2.0).unwrap(), vec![7.0]);
        match profile_eval(&p, -0.1) {
            Err(Error::OutOfRange { t, .. }) => assert_eq!(t, -0.1),
            other => panic!("expected range error, got {other:?}"),
        }
    }

    #[test]
    fn shape_checks() {
        let grid = TimeGrid::new(vec![0.0, 1.0, 2.0], TimeUnit::Seconds).unwrap();
        assert!(PiecewiseConstantProfile::new(grid.clone(), vec![vec![1.0]]).is_err());
        assert!(PiecewiseConstantProfile::new(grid, vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn restrict_keeps_values() {
        let p = two_step().restrict(0.5, 1.5).unwrap();
        assert_eq!(p.grid().points(), &[0.5, 1.0, 1.5]);
        assert_eq!(p.values(), &[vec![5.0], vec![7.0]]);
    }

    proptest! {
        #[test]
        fn piecewise_constant_within_interval(vals in prop::collection::vec(-10.0f64..10.0, 1..6), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let n = vals.len();
            let grid = TimeGrid::uniform(0.0, n as f64, n, TimeUnit::Seconds).unwrap();
            let p = PiecewiseConstantProfile::new(grid, vals.iter().map(|v| vec![*v]).collect()).unwrap();
            for k in 0..n {
                let ta = k as f64 + a * 0.999;
                let tb = k as f64 + b * 0.999;
                prop_assert_eq!(p.eval(ta).unwrap(), p.eval(tb).unwrap());
                prop_assert_eq!(p.eval(ta).unwrap(), p.eval(ta).unwrap());
            }
        }
    }
}
