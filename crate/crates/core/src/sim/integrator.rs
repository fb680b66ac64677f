use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_dims, Flux, FluxMap, ModelStructure, PiecewiseConstantProfile, TimeGrid, Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[default]
    Rk4,
    ImplicitEuler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default)]
    pub method: Method,
    pub max_step: f64,
    #[serde(default = "default_newton_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_newton_max_iter")]
    pub newton_max_iter: usize,
}

fn default_newton_tol() -> f64 {
    1e-10
}

fn default_newton_max_iter() -> usize {
    50
}

impl IntegratorConfig {
    pub fn rk4(max_step: f64) -> Self {
        Self {
            method: Method::Rk4,
            max_step,
            newton_tol: default_newton_tol(),
            newton_max_iter: default_newton_max_iter(),
        }
    }

    pub fn implicit_euler(max_step: f64) -> Self {
        Self {
            method: Method::ImplicitEuler,
            ..Self::rk4(max_step)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_step > 0.0) || !self.max_step.is_finite() {
            return Err(Error::invalid("integrator", "max_step must be > 0"));
        }
        if !(self.newton_tol > 0.0) || self.newton_max_iter == 0 {
            return Err(Error::invalid("integrator", "Newton settings must be positive"));
        }
        Ok(())
    }
}

/// Flux values as seen by the stepper.
#[derive(Clone, Copy)]
pub(crate) enum FluxValues<'a> {
    /// Flat interval-major values on the plan's flux grid.
    Intervals { flat: &'a [f64], dim: usize },
    Constant(&'a [f64]),
    Map(&'a dyn FluxMap),
}

/// Precomputed substep layout: the refined union of all knot grids, the MV and
/// flux interval active on every substep, and where the requested output
/// points sit. Substeps never straddle a knot, so restarting the integration
/// from any stored point reproduces the remainder of a full run bit for bit.
#[derive(Debug, Clone)]
pub(crate) struct SimPlan {
    pub times: Vec<f64>,
    pub mv_idx: Vec<usize>,
    pub flux_idx: Vec<usize>,
    pub out_idx: Vec<usize>,
}

impl SimPlan {
    pub fn new(
        mv_grid: &TimeGrid,
        flux_grid: Option<&TimeGrid>,
        out_grid: &TimeGrid,
        extra: &[&TimeGrid],
        max_step: f64,
    ) -> Result<Self> {
        let (start, end) = (out_grid.first(), out_grid.last());
        if start < mv_grid.first() || end > mv_grid.last() {
            return Err(Error::Consistency(format!(
                "output span [{start}, {end}] not covered by MV grid [{}, {}]",
                mv_grid.first(),
                mv_grid.last()
            )));
        }
        let mut grids: Vec<&TimeGrid> = vec![out_grid, mv_grid];
        if let Some(g) = flux_grid {
            if start < g.first() || end > g.last() {
                return Err(Error::Consistency("flux grid does not cover output span".into()));
            }
            grids.push(g);
        }
        grids.extend_from_slice(extra);
        let fine = TimeGrid::union(&grids, start, end)?.refine(max_step)?;
        let times = fine.points().to_vec();
        let mids: Vec<f64> = fine.midpoints();
        let mv_idx = mids
            .iter()
            .map(|&m| mv_grid.interval_of(m))
            .collect::<Result<Vec<_>>>()?;
        let flux_idx = match flux_grid {
            Some(g) => mids
                .iter()
                .map(|&m| g.interval_of(m))
                .collect::<Result<Vec<_>>>()?,
            None => vec![0; mids.len()],
        };
        let out_idx = out_grid
            .points()
            .iter()
            .map(|&t| {
                fine.index_of(t)
                    .ok_or_else(|| Error::Consistency(format!("output time {t} lost in refinement")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            times,
            mv_idx,
            flux_idx,
            out_idx,
        })
    }

    pub fn n_points(&self) -> usize {
        self.times.len()
    }

    /// Index of the fine-grid point equal to `t`.
    pub fn point_index(&self, t: f64) -> Option<usize> {
        let tol = 1e-10 * self.times[0].abs().max(self.times[self.times.len() - 1].abs()).max(1.0);
        let k = self.times.partition_point(|&p| p < t - tol);
        (k < self.times.len() && (self.times[k] - t).abs() <= tol).then_some(k)
    }
}

struct Stepper<'a> {
    model: &'a dyn ModelStructure,
    flux: FluxValues<'a>,
    cfg: &'a IntegratorConfig,
    n_x: usize,
    p: Vec<f64>,
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a dyn ModelStructure, flux: FluxValues<'a>, cfg: &'a IntegratorConfig) -> Self {
        let n_x = model.n_x();
        let n_p = model.n_p();
        Self {
            model,
            flux,
            cfg,
            n_x,
            p: vec![0.0; n_p],
            k: std::array::from_fn(|_| vec![0.0; n_x]),
            tmp: vec![0.0; n_x],
        }
    }

    fn f(&mut self, t: f64, x: &[f64], u: &[f64], flux_k: usize, which: usize) -> Result<()> {
        match self.flux {
            FluxValues::Intervals { flat, dim } => {
                self.p.copy_from_slice(&flat[flux_k * dim..(flux_k + 1) * dim])
            }
            FluxValues::Constant(c) => self.p.copy_from_slice(c),
            FluxValues::Map(m) => m.eval(t, x, u, &mut self.p)?,
        }
        self.model.rhs(t, x, u, &self.p, &mut self.k[which])
    }

    fn rk4(&mut self, t: f64, h: f64, x: &mut [f64], u: &[f64], fk: usize) -> Result<()> {
        self.f(t, x, u, fk, 0)?;
        for ((s, xi), ki) in self.tmp.iter_mut().zip(&*x).zip(&self.k[0]) {
            *s = xi + 0.5 * h * ki;
        }
        let tmp = std::mem::take(&mut self.tmp);
        self.f(t + 0.5 * h, &tmp, u, fk, 1)?;
        self.tmp = tmp;
        for ((s, xi), ki) in self.tmp.iter_mut().zip(&*x).zip(&self.k[1]) {
            *s = xi + 0.5 * h * ki;
        }
        let tmp = std::mem::take(&mut self.tmp);
        self.f(t + 0.5 * h, &tmp, u, fk, 2)?;
        self.tmp = tmp;
        for ((s, xi), ki) in self.tmp.iter_mut().zip(&*x).zip(&self.k[2]) {
            *s = xi + h * ki;
        }
        let tmp = std::mem::take(&mut self.tmp);
        self.f(t + h, &tmp, u, fk, 3)?;
        self.tmp = tmp;
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += h / 6.0 * (self.k[0][i] + 2.0 * self.k[1][i] + 2.0 * self.k[2][i] + self.k[3][i]);
        }
        Ok(())
    }

    /// Solves `y = x + h f(t + h, y)` by Newton with a forward-difference Jacobian.
    fn implicit_euler(&mut self, t: f64, h: f64, x: &mut [f64], u: &[f64], fk: usize) -> Result<()> {
        let n = self.n_x;
        let t1 = t + h;
        let mut y = x.to_vec();
        let mut yp = vec![0.0; n];
        for _ in 0..self.cfg.newton_max_iter {
            self.f(t1, &y, u, fk, 0)?;
            let g = DVector::from_fn(n, |i, _| y[i] - x[i] - h * self.k[0][i]);
            let mut jac = DMatrix::identity(n, n);
            for j in 0..n {
                let dy = 1e-7 * y[j].abs().max(1.0);
                yp.copy_from_slice(&y);
                yp[j] += dy;
                let yp_local = std::mem::take(&mut yp);
                self.f(t1, &yp_local, u, fk, 1)?;
                yp = yp_local;
                for i in 0..n {
                    jac[(i, j)] -= h * (self.k[1][i] - self.k[0][i]) / dy;
                }
            }
            let delta = jac.lu().solve(&g).ok_or_else(|| Error::Integration {
                t,
                reason: "singular Newton matrix".into(),
            })?;
            let mut norm: f64 = 0.0;
            let mut scale: f64 = 1.0;
            for i in 0..n {
                y[i] -= delta[i];
                norm = norm.max(delta[i].abs());
                scale = scale.max(y[i].abs());
            }
            if !norm.is_finite() {
                break;
            }
            if norm <= self.cfg.newton_tol * scale {
                x.copy_from_slice(&y);
                return Ok(());
            }
        }
        Err(Error::Integration {
            t,
            reason: "Newton iteration did not converge".into(),
        })
    }
}

/// Integrates from fine-grid index `start` (whose state is already in `out`)
/// to the end of the plan, writing every fine-grid state into the flat buffer
/// `out` (`n_points × n_x`).
pub(crate) fn integrate_plan(
    model: &dyn ModelStructure,
    flux: FluxValues<'_>,
    mv: &PiecewiseConstantProfile,
    plan: &SimPlan,
    cfg: &IntegratorConfig,
    start: usize,
    out: &mut [f64],
) -> Result<()> {
    let n_x = model.n_x();
    let mut stepper = Stepper::new(model, flux, cfg);
    let mut x = out[start * n_x..(start + 1) * n_x].to_vec();
    for i in start..plan.n_points() - 1 {
        let (t0, t1) = (plan.times[i], plan.times[i + 1]);
        let u = &mv.values()[plan.mv_idx[i]];
        let fk = plan.flux_idx[i];
        match cfg.method {
            Method::Rk4 => stepper.rk4(t0, t1 - t0, &mut x, u, fk)?,
            Method::ImplicitEuler => stepper.implicit_euler(t0, t1 - t0, &mut x, u, fk)?,
        }
        if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::Integration {
                t: t1,
                reason: format!("non-finite state {bad}"),
            });
        }
        out[(i + 1) * n_x..(i + 2) * n_x].copy_from_slice(&x);
    }
    Ok(())
}

/// Forward simulation of `ẋ = f(x, u(t), p(t))`, sampled exactly on `out_grid`.
pub fn simulate(
    model: &dyn ModelStructure,
    x0: &[f64],
    mv: &PiecewiseConstantProfile,
    flux: Flux<'_>,
    out_grid: &TimeGrid,
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_dims(model, x0, mv.dim(), flux.dim())?;
    let flat;
    let (flux_grid, values) = match flux {
        Flux::Profile(p) => {
            flat = p.flatten();
            (
                Some(p.grid()),
                FluxValues::Intervals {
                    flat: &flat,
                    dim: p.dim(),
                },
            )
        }
        Flux::Constant(c) => (None, FluxValues::Constant(c)),
        Flux::Map(m) => (None, FluxValues::Map(m)),
    };
    let plan = SimPlan::new(mv.grid(), flux_grid, out_grid, &[], cfg.max_step)?;
    let n_x = model.n_x();
    let mut buf = vec![0.0; plan.n_points() * n_x];
    buf[..n_x].copy_from_slice(x0);
    integrate_plan(model, values, mv, &plan, cfg, 0, &mut buf)?;
    Ok(sample_plan(model, &plan, &buf, out_grid.clone()))
}

/// Extracts the output-grid rows of a full fine-grid buffer.
fn sample_plan(
    model: &dyn ModelStructure,
    plan: &SimPlan,
    buf: &[f64],
    out_grid: TimeGrid,
) -> Trajectory {
    let n_x = model.n_x();
    let n_z = model.n_z();
    let states: Vec<Vec<f64>> = plan
        .out_idx
        .iter()
        .map(|&i| buf[i * n_x..(i + 1) * n_x].to_vec())
        .collect();
    let outputs = states
        .iter()
        .map(|x| {
            let mut z = vec![0.0; n_z];
            model.output(x, &mut z);
            z
        })
        .collect();
    Trajectory {
        grid: out_grid,
        states,
        outputs: Some(outputs),
    }
}
