//! Three buffer tanks in series draining into a reservoir (time in seconds).
//!
//! Holdups act as levels over a unit cross-section. Inter-tank flows follow
//! Torricelli's law `F = c·√h` of the upstream holdup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FluxMap, ModelStructure, TimeUnit, VarInfo, VarNames};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TankParams {
    pub c12: f64,
    pub c23: f64,
    pub c3r: f64,
}

impl Default for TankParams {
    fn default() -> Self {
        Self {
            c12: 0.05,
            c23: 0.05,
            c3r: 0.05,
        }
    }
}

impl TankParams {
    pub fn validate(&self) -> Result<()> {
        if [self.c12, self.c23, self.c3r].iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::invalid("tank parameters", "outflow coefficients must be >= 0"));
        }
        Ok(())
    }

    /// `(F12, F23, F3r)` for holdups `x = (h1, h2, h3, h_res)`.
    pub fn flows(&self, x: &[f64], t: f64) -> Result<[f64; 3]> {
        if let Some((i, h)) = x.iter().enumerate().find(|(_, h)| !(**h >= 0.0)) {
            return Err(Error::Domain {
                t,
                reason: format!("holdup {} = {h} is negative", TANK_STATES[i]),
            });
        }
        Ok([self.c12 * x[0].sqrt(), self.c23 * x[1].sqrt(), self.c3r * x[2].sqrt()])
    }

    /// Inflow to tank 1 holding tank 2 at `h2` in steady state.
    pub fn steady_inflow_for_h2(&self, h2: f64) -> f64 {
        self.c23 * h2.sqrt()
    }
}

const TANK_STATES: [&str; 4] = ["h1", "h2", "h3", "h_res"];

/// Mass balances with Torricelli flows, `u = (F1_in, F3_in)`.
pub fn tank_truth_rhs(params: &TankParams, x: &[f64], u: &[f64]) -> Result<[f64; 4]> {
    let [f12, f23, f3r] = params.flows(x, f64::NAN)?;
    Ok([u[0] - f12, f12 - f23, u[1] + f23 - f3r, f3r - u[0] - u[1]])
}

/// Hybrid structure with all inter-tank flows unknown:
/// `ḣ1 = F1 + p1`, `ḣ2 = p2`, `ḣ3 = F3 + p3`, `ḣres = −F1 − F3 + p4`.
#[derive(Debug, Clone)]
pub struct TankStructure {
    names: VarNames,
}

impl Default for TankStructure {
    fn default() -> Self {
        let holdup = |n: &str| VarInfo::new(n, "holdup");
        Self {
            names: VarNames {
                states: TANK_STATES.iter().map(|n| holdup(n)).collect(),
                inputs: vec![VarInfo::new("F1_in", "holdup/s"), VarInfo::new("F3_in", "holdup/s")],
                fluxes: (1..=4).map(|i| VarInfo::new(&format!("p{i}"), "holdup/s")).collect(),
                outputs: TANK_STATES.iter().map(|n| holdup(n)).collect(),
            },
        }
    }
}

impl ModelStructure for TankStructure {
    fn id(&self) -> &str {
        "three-tank"
    }

    fn names(&self) -> &VarNames {
        &self.names
    }

    fn time_unit(&self) -> TimeUnit {
        TimeUnit::Seconds
    }

    fn rhs(&self, _t: f64, _x: &[f64], u: &[f64], p: &[f64], dx: &mut [f64]) -> Result<()> {
        dx[0] = u[0] + p[0];
        dx[1] = p[1];
        dx[2] = u[1] + p[2];
        dx[3] = -u[0] - u[1] + p[3];
        Ok(())
    }

    fn output(&self, x: &[f64], z: &mut [f64]) {
        z.copy_from_slice(x);
    }

    fn output_inverse(&self, z: &[f64]) -> Option<Vec<f64>> {
        Some(z.to_vec())
    }

    fn state_bounds(&self) -> Option<Vec<(f64, f64)>> {
        Some(vec![(0.0, f64::INFINITY); 4])
    }
}

/// Torricelli flows expressed as the hybrid structure's fluxes.
#[derive(Debug, Clone, Default)]
pub struct TankTruthFluxes {
    pub params: TankParams,
}

impl FluxMap for TankTruthFluxes {
    fn n_p(&self) -> usize {
        4
    }

    fn eval(&self, t: f64, x: &[f64], _u: &[f64], p: &mut [f64]) -> Result<()> {
        let [f12, f23, f3r] = self.params.flows(x, t)?;
        p[0] = -f12;
        p[1] = f12 - f23;
        p[2] = f23 - f3r;
        p[3] = f3r;
        Ok(())
    }
}
