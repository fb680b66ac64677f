use serde::{Deserialize, Serialize};

use super::grid::TimeGrid;
use crate::error::{Error, Result};

/// States (and optionally outputs) sampled on a time grid; one row per point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub states: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outputs: Option<Vec<Vec<f64>>>,
}

impl Trajectory {
    pub fn new(grid: TimeGrid, states: Vec<Vec<f64>>, outputs: Option<Vec<Vec<f64>>>) -> Result<Self> {
        if states.len() != grid.len() {
            return Err(Error::dimension("trajectory rows", grid.len(), states.len()));
        }
        if let Some(o) = &outputs {
            if o.len() != grid.len() {
                return Err(Error::dimension("trajectory output rows", grid.len(), o.len()));
            }
        }
        Ok(Self { grid, states, outputs })
    }

    pub fn state_at(&self, t: f64) -> Result<&[f64]> {
        self.grid
            .index_of(t)
            .map(|i| self.states[i].as_slice())
            .ok_or_else(|| Error::Consistency(format!("trajectory has no sample at t = {t}")))
    }

    pub fn output_at(&self, t: f64) -> Result<&[f64]> {
        let outputs = self
            .outputs
            .as_ref()
            .ok_or_else(|| Error::Consistency("trajectory carries no outputs".into()))?;
        self.grid
            .index_of(t)
            .map(|i| outputs[i].as_slice())
            .ok_or_else(|| Error::Consistency(format!("trajectory has no sample at t = {t}")))
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.states.iter().map(|r| r[i]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().flatten().all(|v| v.is_finite())
    }
}
