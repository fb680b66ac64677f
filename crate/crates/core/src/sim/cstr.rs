//! Continuous stirred tank reactor with Arrhenius kinetics (time in minutes).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FluxMap, ModelStructure, TimeUnit, VarInfo, VarNames};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CstrParams {
    /// Feed flow, m³/min.
    pub f0: f64,
    /// Feed temperature, K.
    pub t0: f64,
    /// Feed concentration, kmol/m³.
    pub c0: f64,
    /// Reactor radius, m.
    pub r: f64,
    /// Pre-exponential factor, 1/min.
    pub k0: f64,
    /// Activation temperature E_a/R, K.
    pub e_r: f64,
    /// Heat transfer coefficient, kJ/(min·m²·K).
    pub u: f64,
    pub rho: f64,
    pub cp: f64,
    /// Reaction enthalpy, kJ/kmol (exothermic: negative).
    pub dh: f64,
}

impl Default for CstrParams {
    fn default() -> Self {
        Self {
            f0: 0.1,
            t0: 350.0,
            c0: 1.0,
            r: 0.219,
            k0: 7.2e10,
            e_r: 8750.0,
            u: 54.94,
            rho: 1000.0,
            cp: 0.239,
            dh: -5e4,
        }
    }
}

impl CstrParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.f0, self.t0, self.c0, self.r, self.k0, self.e_r, self.u, self.rho, self.cp];
        if positive.iter().any(|v| !(*v > 0.0)) || !(self.dh < 0.0) {
            return Err(Error::invalid("CSTR parameters", "all must be positive except dh < 0"));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        PI * self.r * self.r
    }

    /// `k0·exp(−E/(R·T))`, 1/min.
    pub fn rate_constant(&self, temp: f64) -> f64 {
        self.k0 * (-self.e_r / temp).exp()
    }

    /// True reaction flux entering dc/dt.
    pub fn true_p2(&self, c: f64, temp: f64) -> f64 {
        -self.rate_constant(temp) * c
    }

    /// True heat flux entering dT/dt (reaction heat plus jacket exchange).
    pub fn true_p3(&self, c: f64, temp: f64, t_c: f64) -> f64 {
        -self.dh / (self.rho * self.cp) * self.rate_constant(temp) * c
            + 2.0 * self.u / (self.r * self.rho * self.cp) * (t_c - temp)
    }
}

fn check_domain(x: &[f64], t: f64) -> Result<()> {
    if !(x[0] > 0.0) {
        return Err(Error::Domain {
            t,
            reason: format!("level h = {} must be positive", x[0]),
        });
    }
    if !(x[2] > 0.0) {
        return Err(Error::Domain {
            t,
            reason: format!("temperature T = {} must be positive", x[2]),
        });
    }
    Ok(())
}

/// Full first-principles right-hand side, `x = (h, c, T)`, `u = (F_out, T_c)`.
pub fn cstr_truth_rhs(params: &CstrParams, x: &[f64], u: &[f64]) -> Result<[f64; 3]> {
    check_domain(x, f64::NAN)?;
    let (h, c, temp) = (x[0], x[1], x[2]);
    let (f_out, t_c) = (u[0], u[1]);
    let a = params.area();
    let rate = params.k0 * c * (-params.e_r / temp).exp();
    let dh = (params.f0 - f_out) / a;
    let dc = params.f0 * (params.c0 - c) / (a * h) - rate;
    let dtemp = params.f0 * (params.t0 - temp) / (a * h) - params.dh / (params.rho * params.cp) * rate
        + 2.0 * params.u / (params.r * params.rho * params.cp) * (t_c - temp);
    Ok([dh, dc, dtemp])
}

/// Hybrid structure: only the flow terms are known,
/// `ḣ = (F0 − F_out)/A + p1`, `ċ = F0(c0 − c)/(A h) + p2`, `Ṫ = F0(T0 − T)/(A h) + p3`.
#[derive(Debug, Clone)]
pub struct CstrStructure {
    pub params: CstrParams,
    names: VarNames,
}

impl CstrStructure {
    pub fn new(params: CstrParams) -> Self {
        Self {
            params,
            names: VarNames {
                states: vec![VarInfo::new("h", "m"), VarInfo::new("c", "kmol/m3"), VarInfo::new("T", "K")],
                inputs: vec![VarInfo::new("F_out", "m3/min"), VarInfo::new("T_c", "K")],
                fluxes: vec![
                    VarInfo::new("p1", "m/min"),
                    VarInfo::new("p2", "kmol/(m3*min)"),
                    VarInfo::new("p3", "K/min"),
                ],
                outputs: vec![VarInfo::new("h", "m"), VarInfo::new("c", "kmol/m3"), VarInfo::new("T", "K")],
            },
        }
    }
}

impl Default for CstrStructure {
    fn default() -> Self {
        Self::new(CstrParams::default())
    }
}

impl ModelStructure for CstrStructure {
    fn id(&self) -> &str {
        "cstr"
    }

    fn names(&self) -> &VarNames {
        &self.names
    }

    fn time_unit(&self) -> TimeUnit {
        TimeUnit::Minutes
    }

    fn rhs(&self, t: f64, x: &[f64], u: &[f64], p: &[f64], dx: &mut [f64]) -> Result<()> {
        check_domain(x, t)?;
        let q = &self.params;
        let a = q.area();
        dx[0] = (q.f0 - u[0]) / a + p[0];
        dx[1] = q.f0 * (q.c0 - x[1]) / (a * x[0]) + p[1];
        dx[2] = q.f0 * (q.t0 - x[2]) / (a * x[0]) + p[2];
        Ok(())
    }

    fn output(&self, x: &[f64], z: &mut [f64]) {
        z.copy_from_slice(x);
    }

    fn output_inverse(&self, z: &[f64]) -> Option<Vec<f64>> {
        Some(z.to_vec())
    }

    fn state_bounds(&self) -> Option<Vec<(f64, f64)>> {
        Some(vec![(1e-3, f64::INFINITY), (0.0, f64::INFINITY), (1.0, f64::INFINITY)])
    }
}

/// The unknown terms of the hybrid structure evaluated from the full model.
#[derive(Debug, Clone, Default)]
pub struct CstrTruthFluxes {
    pub params: CstrParams,
}

impl FluxMap for CstrTruthFluxes {
    fn n_p(&self) -> usize {
        3
    }

    fn eval(&self, t: f64, x: &[f64], u: &[f64], p: &mut [f64]) -> Result<()> {
        check_domain(x, t)?;
        p[0] = 0.0;
        p[1] = self.params.true_p2(x[1], x[2]);
        p[2] = self.params.true_p3(x[1], x[2], u[1]);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_constant_at_350k() {
        // 7.2e10·exp(−8750/350), evaluated independently
        let q = CstrParams::default();
        assert!((q.rate_constant(350.0) - 0.9999319582774095).abs() < 1e-12);
        assert!((q.true_p2(0.5, 350.0) - (-0.4999659791387048)).abs() < 1e-12);
        assert!((q.true_p3(0.5, 350.0, 300.0) - (-0.3701214808884572)).abs() < 1e-9);
    }

    #[test]
    fn level_is_constant_when_outflow_equals_feed() {
        let q = CstrParams::default();
        let d = cstr_truth_rhs(&q, &[0.7, 0.5, 340.0], &[q.f0, 300.0]).unwrap();
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn domain_violations_are_errors() {
        let q = CstrParams::default();
        assert!(matches!(cstr_truth_rhs(&q, &[0.0, 0.5, 340.0], &[0.1, 300.0]), Err(Error::Domain { .. })));
        assert!(matches!(cstr_truth_rhs(&q, &[0.5, 0.5, -1.0], &[0.1, 300.0]), Err(Error::Domain { .. })));
        let s = CstrStructure::default();
        let mut dx = [0.0; 3];
        assert!(s.rhs(2.0, &[-0.1, 0.5, 340.0], &[0.1, 300.0], &[0.0; 3], &mut dx).is_err());
    }

    #[test]
    fn structure_plus_true_fluxes_is_the_full_model() {
        let q = CstrParams::default();
        let s = CstrStructure::new(q.clone());
        let fl = CstrTruthFluxes { params: q.clone() };
        for (x, u) in [
            ([0.66, 0.88, 324.5], [0.1, 300.0]),
            ([0.5, 0.2, 380.0], [0.12, 310.0]),
            ([0.8, 0.95, 315.0], [0.08, 290.0]),
        ] {
            let mut p = [0.0; 3];
            fl.eval(0.0, &x, &u, &mut p).unwrap();
            let mut dx = [0.0; 3];
            s.rhs(0.0, &x, &u, &p, &mut dx).unwrap();
            let full = cstr_truth_rhs(&q, &x, &u).unwrap();
            for i in 0..3 {
                assert!((dx[i] - full[i]).abs() <= 1e-12 * full[i].abs().max(1.0));
            }
        }
    }
}
