//! Regularized single-shooting estimation of piecewise-constant flux profiles.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    MeasurementDataset, ModelStructure, PiecewiseConstantProfile, TimeGrid, Trajectory, WeightFactor, WeightMatrix,
};
use crate::nls::{fd_step, lm_solve, LmConfig, LmReport, ResidualProblem};
use crate::sim::{integrate_plan, FluxValues, IntegratorConfig, SimPlan};

/// Weights on successive flux differences: a scalar `w` means `w·I` on every
/// interval boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RegWeights {
    Scalar(f64),
    PerBoundary(Vec<WeightMatrix>),
}

impl Default for RegWeights {
    fn default() -> Self {
        RegWeights::Scalar(1e-2)
    }
}

impl RegWeights {
    /// One weight matrix per interior boundary of a grid with `n_intervals`.
    pub fn expand(&self, n_p: usize, n_intervals: usize) -> Result<Vec<WeightMatrix>> {
        let n_b = n_intervals.saturating_sub(1);
        match self {
            RegWeights::Scalar(w) => {
                if !(*w >= 0.0) || !w.is_finite() {
                    return Err(Error::invalid("w_reg", "scalar weight must be finite and >= 0"));
                }
                Ok(vec![WeightMatrix::scaled_identity(n_p, *w); n_b])
            }
            RegWeights::PerBoundary(ws) => {
                if ws.len() != n_b {
                    return Err(Error::dimension("w_reg matrices", n_b, ws.len()));
                }
                for w in ws {
                    if w.dim() != n_p {
                        return Err(Error::dimension("w_reg matrix", n_p, w.dim()));
                    }
                    w.validate()?;
                }
                Ok(ws.clone())
            }
        }
    }
}

/// Starting values for the flux intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FluxInit {
    Constant(Vec<f64>),
    Profile(PiecewiseConstantProfile),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    /// Flux discretization; `None` takes every `disc_factor`-th measurement time.
    pub disc_grid: Option<TimeGrid>,
    pub disc_factor: usize,
    /// Choose with care: too large a weight flattens genuine flux dynamics.
    pub w_reg: RegWeights,
    pub estimate_x0: bool,
    pub x0_bounds: Option<Vec<(f64, f64)>>,
    /// `None` starts from zero fluxes.
    pub p_init: Option<FluxInit>,
    /// `None` uses RK4 with a tenth of the smallest measurement interval.
    pub integrator: Option<IntegratorConfig>,
    pub lm: LmConfig,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            disc_grid: None,
            disc_factor: 10,
            w_reg: RegWeights::default(),
            estimate_x0: true,
            x0_bounds: None,
            p_init: None,
            integrator: None,
            lm: LmConfig::default(),
        }
    }
}

/// Every `factor`-th measurement time, always ending at the last one.
pub fn coarsen_grid(meas: &TimeGrid, factor: usize) -> Result<TimeGrid> {
    if factor == 0 {
        return Err(Error::invalid("disc_factor", "must be >= 1"));
    }
    let p = meas.points();
    let mut pts: Vec<f64> = p.iter().step_by(factor).copied().collect();
    if *pts.last().unwrap() != meas.last() {
        if pts.len() > 1 && p.len() - 1 - (pts.len() - 1) * factor < factor / 2 {
            pts.pop();
        }
        pts.push(meas.last());
    }
    TimeGrid::new(pts, meas.unit())
}

/// Default integrator: RK4 with a tenth of the smallest measurement interval.
pub fn default_integrator(meas: &TimeGrid) -> IntegratorConfig {
    let min_dt = meas
        .points()
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    IntegratorConfig::rk4(min_dt / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub dataset: String,
    pub p_star: PiecewiseConstantProfile,
    /// MV profile of the dataset, kept so the result is self-contained.
    pub mv: PiecewiseConstantProfile,
    pub x0_star: Vec<f64>,
    /// Optimal trajectory on the union of measurement times, flux knots and
    /// flux interval midpoints.
    pub trajectory: Trajectory,
    pub fit_cost: f64,
    pub reg_cost: f64,
    /// `z(t_j) − z̃_j` per measurement.
    pub per_point_residuals: Vec<Vec<f64>>,
    pub lm_report: LmReport,
}

impl EstimateResult {
    pub fn total_cost(&self) -> f64 {
        self.fit_cost + self.reg_cost
    }

    /// Weighted fit per scalar measurement.
    pub fn chi2_per_point(&self) -> f64 {
        let n: usize = self.per_point_residuals.iter().map(Vec::len).sum();
        self.fit_cost / n as f64
    }
}

/// `Σ_k (p_{k+1} − p_k)ᵀ W_k (p_{k+1} − p_k)` over adjacent intervals.
pub fn regularization_value(p: &PiecewiseConstantProfile, w_reg: &RegWeights) -> Result<f64> {
    let ws = w_reg.expand(p.dim(), p.n_intervals())?;
    let v = p.values();
    let mut d = vec![0.0; p.dim()];
    Ok(ws
        .iter()
        .enumerate()
        .map(|(k, w)| {
            for (i, di) in d.iter_mut().enumerate() {
                *di = v[k + 1][i] - v[k][i];
            }
            w.quad_form(&d)
        })
        .sum())
}

/// `Σ_j (z_j − z̃_j)ᵀ W_j (z_j − z̃_j)`; the trajectory must contain every
/// measurement time.
pub fn fit_value(traj: &Trajectory, ds: &MeasurementDataset) -> Result<f64> {
    let mut total = 0.0;
    let mut d = vec![0.0; ds.n_z()];
    for ((t, zm), w) in ds.meas_grid.points().iter().zip(&ds.z_meas).zip(&ds.weights) {
        let z = traj.output_at(*t)?;
        if z.len() != zm.len() {
            return Err(Error::dimension("trajectory outputs", zm.len(), z.len()));
        }
        for i in 0..d.len() {
            d[i] = z[i] - zm[i];
        }
        total += w.quad_form(&d);
    }
    Ok(total)
}

struct EstimationProblem<'a> {
    model: &'a dyn ModelStructure,
    ds: &'a MeasurementDataset,
    integ: IntegratorConfig,
    plan: SimPlan,
    disc: TimeGrid,
    n_p: usize,
    n_int: usize,
    n_x: usize,
    n_z: usize,
    fit_factors: Vec<WeightFactor>,
    reg_factors: Vec<DMatrix<f64>>,
    /// Fine-grid index of each measurement time.
    meas_idx: Vec<usize>,
    /// Fine-grid index of each flux knot.
    knot_idx: Vec<usize>,
    /// First measurement strictly after each flux knot.
    first_meas_after: Vec<usize>,
    x0_fixed: Vec<f64>,
    estimate_x0: bool,
    bounds: Option<Vec<(f64, f64)>>,
}

impl<'a> EstimationProblem<'a> {
    fn n_fit(&self) -> usize {
        self.ds.n_meas() * self.n_z
    }

    fn split<'t>(&'t self, theta: &'t [f64]) -> (&'t [f64], &'t [f64]) {
        let n_flux = self.n_int * self.n_p;
        if self.estimate_x0 {
            theta.split_at(n_flux)
        } else {
            (theta, &self.x0_fixed)
        }
    }

    /// Integrates the whole horizon into a fine-grid buffer.
    fn run(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let (flat, x0) = self.split(theta);
        let mut buf = vec![0.0; self.plan.n_points() * self.n_x];
        buf[..self.n_x].copy_from_slice(x0);
        let flux = FluxValues::Intervals { flat, dim: self.n_p };
        integrate_plan(self.model, flux, &self.ds.mv, &self.plan, &self.integ, 0, &mut buf)?;
        Ok(buf)
    }

    fn fit_rows(&self, buf: &[f64], from_meas: usize, out: &mut [f64]) {
        let (n_x, n_z) = (self.n_x, self.n_z);
        let mut z = vec![0.0; n_z];
        let mut d = vec![0.0; n_z];
        for j in from_meas..self.ds.n_meas() {
            let i = self.meas_idx[j];
            self.model.output(&buf[i * n_x..(i + 1) * n_x], &mut z);
            for c in 0..n_z {
                d[c] = z[c] - self.ds.z_meas[j][c];
            }
            self.fit_factors[j].apply(&d, &mut out[j * n_z..(j + 1) * n_z]);
        }
    }

    fn reg_rows(&self, flat: &[f64], out: &mut [f64]) {
        let n_p = self.n_p;
        let mut d = nalgebra::DVector::zeros(n_p);
        for (k, l) in self.reg_factors.iter().enumerate() {
            for i in 0..n_p {
                d[i] = flat[(k + 1) * n_p + i] - flat[k * n_p + i];
            }
            let r = l * &d;
            out[k * n_p..(k + 1) * n_p].copy_from_slice(r.as_slice());
        }
    }

    fn residuals_from(&self, theta: &[f64], buf: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.n_fit() + self.reg_factors.len() * self.n_p];
        let (fit, reg) = r.split_at_mut(self.n_fit());
        self.fit_rows(buf, 0, fit);
        self.reg_rows(self.split(theta).0, reg);
        r
    }
}

impl ResidualProblem for EstimationProblem<'_> {
    fn n_params(&self) -> usize {
        self.n_int * self.n_p + if self.estimate_x0 { self.n_x } else { 0 }
    }

    fn residuals(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let buf = self.run(theta)?;
        Ok(self.residuals_from(theta, &buf))
    }

    fn bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }

    /// Forward differences on the simulated block, restarting each column at
    /// the knot where its flux interval begins (earlier residuals cannot
    /// depend on it); the regularization block is exact.
    fn jacobian(&self, theta: &[f64], r: &[f64]) -> Option<Result<DMatrix<f64>>> {
        Some(self.causal_jacobian(theta, r))
    }
}

impl EstimationProblem<'_> {
    fn causal_jacobian(&self, theta: &[f64], r: &[f64]) -> Result<DMatrix<f64>> {
        let n = self.n_params();
        let (n_p, n_x) = (self.n_p, self.n_x);
        let n_fit = self.n_fit();
        let mut jac = DMatrix::zeros(r.len(), n);
        let base = self.run(theta)?;
        let mut buf = base.clone();
        let mut probe = theta.to_vec();
        let mut rows = vec![0.0; n_fit];
        let n_flux = self.n_int * n_p;

        for col in 0..n {
            let (start, from_meas) = if col < n_flux {
                let k = col / n_p;
                (self.knot_idx[k], self.first_meas_after[k])
            } else {
                (0, 0)
            };
            if from_meas >= self.ds.n_meas() {
                continue;
            }
            let mut h = fd_step(theta[col]);
            if let Some(b) = &self.bounds {
                if theta[col] + h > b[col].1 {
                    h = -h;
                }
            }
            let mut attempt = |h: f64, buf: &mut Vec<f64>| -> Result<()> {
                probe[col] = theta[col] + h;
                buf[start * n_x..(start + 1) * n_x].copy_from_slice(&base[start * n_x..(start + 1) * n_x]);
                if col >= n_flux {
                    buf[..n_x].copy_from_slice(&probe[n_flux..]);
                }
                let (flat, _) = self.split(&probe);
                let res = integrate_plan(
                    self.model,
                    FluxValues::Intervals { flat, dim: n_p },
                    &self.ds.mv,
                    &self.plan,
                    &self.integ,
                    start,
                    buf,
                );
                probe[col] = theta[col];
                res
            };
            if attempt(h, &mut buf).is_err() {
                h = -h;
                attempt(h, &mut buf)?;
            }
            self.fit_rows(&buf, from_meas, &mut rows);
            for row in from_meas * self.n_z..n_fit {
                jac[(row, col)] = (rows[row] - r[row]) / h;
            }
        }

        for (k, l) in self.reg_factors.iter().enumerate() {
            for a in 0..n_p {
                for b in 0..n_p {
                    let v = l[(a, b)];
                    if v != 0.0 {
                        jac[(n_fit + k * n_p + a, (k + 1) * n_p + b)] = v;
                        jac[(n_fit + k * n_p + a, k * n_p + b)] = -v;
                    }
                }
            }
        }
        Ok(jac)
    }
}

fn initial_theta(
    model: &dyn ModelStructure,
    ds: &MeasurementDataset,
    disc: &TimeGrid,
    cfg: &EstimationConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_p = model.n_p();
    let mut theta = match &cfg.p_init {
        None => vec![0.0; n_p * disc.n_intervals()],
        Some(FluxInit::Constant(v)) => {
            if v.len() != n_p {
                return Err(Error::dimension("p_init", n_p, v.len()));
            }
            v.repeat(disc.n_intervals())
        }
        Some(FluxInit::Profile(p)) => {
            if p.dim() != n_p {
                return Err(Error::dimension("p_init", n_p, p.dim()));
            }
            disc.midpoints()
                .iter()
                .map(|&t| p.eval(t).map(<[f64]>::to_vec))
                .collect::<Result<Vec<_>>>()?
                .concat()
        }
    };
    let x0 = model
        .output_inverse(&ds.z_meas[0])
        .unwrap_or_else(|| ds.x0_guess.clone());
    if x0.len() != model.n_x() {
        return Err(Error::dimension("initial state", model.n_x(), x0.len()));
    }
    if cfg.estimate_x0 {
        theta.extend_from_slice(&x0);
    }
    Ok((theta, x0))
}

/// Fits one piecewise-constant flux profile (and optionally the initial state)
/// to one dataset.
pub fn estimate_fluxes(
    model: &dyn ModelStructure,
    ds: &MeasurementDataset,
    cfg: &EstimationConfig,
) -> Result<EstimateResult> {
    let (n_x, n_p, n_z) = (model.n_x(), model.n_p(), model.n_z());
    if ds.n_z() != n_z {
        return Err(Error::dimension("dataset outputs", n_z, ds.n_z()));
    }
    if ds.mv.dim() != model.n_u() {
        return Err(Error::dimension("dataset MVs", model.n_u(), ds.mv.dim()));
    }
    if n_p == 0 {
        return Err(Error::invalid("model", "no flux variables to estimate"));
    }
    let meas = &ds.meas_grid;
    if meas.unit() != model.time_unit() {
        return Err(Error::Config(format!(
            "dataset time unit {:?} differs from model unit {:?}",
            meas.unit(),
            model.time_unit()
        )));
    }
    let disc = match &cfg.disc_grid {
        Some(g) => g.clone(),
        None => coarsen_grid(meas, cfg.disc_factor)?,
    };
    let tol = 1e-10 * meas.first().abs().max(meas.last().abs()).max(1.0);
    if (disc.first() - meas.first()).abs() > tol || (disc.last() - meas.last()).abs() > tol {
        return Err(Error::Config(format!(
            "flux grid [{}, {}] must start and end at the measurement grid [{}, {}]",
            disc.first(),
            disc.last(),
            meas.first(),
            meas.last()
        )));
    }
    if disc.unit() != meas.unit() {
        return Err(Error::Config("flux grid and measurement grid use different time units".into()));
    }
    let integ = cfg.integrator.clone().unwrap_or_else(|| default_integrator(meas));
    integ.validate()?;
    cfg.lm.validate()?;

    let n_int = disc.n_intervals();
    let reg_w = cfg.w_reg.expand(n_p, n_int)?;
    let mids = TimeGrid::from_unsorted(disc.midpoints(), meas.first(), meas.last(), meas.unit())?;
    let traj_grid = TimeGrid::union(&[meas, &disc, &mids], meas.first(), meas.last())?;
    let plan = SimPlan::new(ds.mv.grid(), Some(&disc), &traj_grid, &[], integ.max_step)?;
    let locate = |t: f64| {
        plan.point_index(t)
            .ok_or_else(|| Error::Consistency(format!("time {t} missing from the integration grid")))
    };
    let meas_idx = meas.points().iter().map(|&t| locate(t)).collect::<Result<Vec<_>>>()?;
    let knot_idx = disc.points()[..n_int]
        .iter()
        .map(|&t| locate(t))
        .collect::<Result<Vec<_>>>()?;
    let first_meas_after = knot_idx
        .iter()
        .map(|&k| meas_idx.partition_point(|&m| m <= k))
        .collect();

    let (theta0, x0_init) = initial_theta(model, ds, &disc, cfg)?;
    let bounds = {
        let fb = model.flux_bounds();
        let xb = cfg.x0_bounds.clone().or_else(|| model.state_bounds());
        if fb.is_none() && (xb.is_none() || !cfg.estimate_x0) {
            None
        } else {
            let fb = fb.unwrap_or_else(|| vec![(f64::NEG_INFINITY, f64::INFINITY); n_p]);
            if fb.len() != n_p {
                return Err(Error::dimension("flux bounds", n_p, fb.len()));
            }
            let mut b = fb.repeat(n_int);
            if cfg.estimate_x0 {
                let xb = xb.unwrap_or_else(|| vec![(f64::NEG_INFINITY, f64::INFINITY); n_x]);
                if xb.len() != n_x {
                    return Err(Error::dimension("x0 bounds", n_x, xb.len()));
                }
                b.extend(xb);
            }
            Some(b)
        }
    };

    let problem = EstimationProblem {
        model,
        ds,
        integ,
        plan,
        disc: disc.clone(),
        n_p,
        n_int,
        n_x,
        n_z,
        fit_factors: ds.weights.iter().map(WeightMatrix::factor).collect(),
        reg_factors: reg_w.iter().map(|w| w.factor().matrix()).collect(),
        meas_idx,
        knot_idx,
        first_meas_after,
        x0_fixed: x0_init,
        estimate_x0: cfg.estimate_x0,
        bounds,
    };
    let report = lm_solve(&problem, &theta0, &cfg.lm).map_err(|e| Error::Estimation(format!("{}: {e}", ds.name)))?;
    finish(&problem, traj_grid, report)
}

fn finish(problem: &EstimationProblem<'_>, traj_grid: TimeGrid, report: LmReport) -> Result<EstimateResult> {
    let (n_x, n_z) = (problem.n_x, problem.n_z);
    let theta = &report.theta_opt;
    let buf = problem.run(theta)?;
    let (flat, x0) = problem.split(theta);
    let p_star = PiecewiseConstantProfile::from_flat(problem.disc.clone(), problem.n_p, flat)?;
    let x0_star = x0.to_vec();
    let r = problem.residuals_from(theta, &buf);
    let n_fit = problem.n_fit();
    let fit_cost: f64 = r[..n_fit].iter().map(|v| v * v).sum();
    let reg_cost: f64 = r[n_fit..].iter().map(|v| v * v).sum();

    let states: Vec<Vec<f64>> = traj_grid
        .points()
        .iter()
        .map(|&t| {
            let i = problem.plan.point_index(t).expect("trajectory grid is part of the plan");
            buf[i * n_x..(i + 1) * n_x].to_vec()
        })
        .collect();
    let outputs = states
        .iter()
        .map(|x| {
            let mut z = vec![0.0; n_z];
            problem.model.output(x, &mut z);
            z
        })
        .collect();
    let per_point_residuals = problem
        .meas_idx
        .iter()
        .zip(&problem.ds.z_meas)
        .map(|(&i, zm)| {
            let mut z = vec![0.0; n_z];
            problem.model.output(&buf[i * n_x..(i + 1) * n_x], &mut z);
            z.iter().zip(zm).map(|(a, b)| a - b).collect()
        })
        .collect();
    Ok(EstimateResult {
        dataset: problem.ds.name.clone(),
        p_star,
        mv: problem.ds.mv.clone(),
        x0_star,
        trajectory: Trajectory::new(traj_grid, states, Some(outputs))?,
        fit_cost,
        reg_cost,
        per_point_residuals,
        lm_report: report,
    })
}

/// Independent estimation of every dataset, in parallel. Results keep the
/// dataset order.
pub fn estimate_all(
    model: &dyn ModelStructure,
    datasets: &[MeasurementDataset],
    cfg: &EstimationConfig,
) -> Result<Vec<EstimateResult>> {
    datasets
        .par_iter()
        .enumerate()
        .map(|(i, ds)| {
            estimate_fluxes(model, ds, cfg).map_err(|e| Error::Scenario {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}
