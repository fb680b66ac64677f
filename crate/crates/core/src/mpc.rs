//! Receding-horizon tracking control with a hybrid (or any closed) model as
//! the prediction model, and a closed-loop harness against a plant model.

use std::time::Instant;

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ClosedModel, Flux, ModelStructure, PiecewiseConstantProfile, TimeGrid, TimeUnit};
use crate::nls::{lm_solve, signed_step, LmConfig, ResidualProblem, Termination};
use crate::sim::{integrate_plan, simulate, stream_rng, FluxValues, IntegratorConfig, SimPlan};

/// Piecewise-constant targets: `values[i]` holds from `times[i]` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setpoints {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl Setpoints {
    pub fn constant(value: Vec<f64>) -> Self {
        Self {
            times: vec![0.0],
            values: vec![value],
        }
    }

    /// `before` until `t_step`, `after` from then on.
    pub fn step(before: Vec<f64>, after: Vec<f64>, t_step: f64) -> Self {
        Self {
            times: vec![0.0, t_step],
            values: vec![before, after],
        }
    }

    pub fn at(&self, t: f64) -> &[f64] {
        let k = self.times.partition_point(|&s| s <= t);
        &self.values[k.saturating_sub(1)]
    }

    fn validate(&self, n_cv: usize) -> Result<()> {
        if self.times.is_empty() || self.times.len() != self.values.len() {
            return Err(Error::invalid("setpoints", "need one value per switching time"));
        }
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("setpoints", "switching times must increase"));
        }
        if self.values.iter().any(|v| v.len() != n_cv || v.iter().any(|x| !x.is_finite())) {
            return Err(Error::invalid("setpoints", format!("each target needs {n_cv} finite values")));
        }
        Ok(())
    }
}

/// Missing fields take their three-tank defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    pub sampling: f64,
    pub horizon: f64,
    /// Controlled outputs, by name.
    pub cvs: Vec<String>,
    /// Diagonal tracking weights, one per CV.
    pub q: Vec<f64>,
    /// Diagonal move-suppression weights, one per MV.
    pub s: Vec<f64>,
    pub mv_bounds: Vec<(f64, f64)>,
    pub setpoints: Setpoints,
    #[serde(default = "mpc_lm")]
    pub lm: LmConfig,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    #[serde(default = "mpc_integrator")]
    pub integrator: IntegratorConfig,
}

fn default_true() -> bool {
    true
}

fn mpc_lm() -> LmConfig {
    LmConfig {
        max_iter: 50,
        ..LmConfig::default()
    }
}

fn mpc_integrator() -> IntegratorConfig {
    IntegratorConfig::rk4(4.0)
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self::three_tank(1.0)
    }
}

impl MpcConfig {
    /// Three-tank defaults: 8 s sampling, 180 s horizon, `h2` tracked with unit
    /// weight, move weight 0.1 on both inflows.
    pub fn three_tank(h2_setpoint: f64) -> Self {
        Self {
            sampling: 8.0,
            horizon: 180.0,
            cvs: vec!["h2".into()],
            q: vec![1.0],
            s: vec![0.1, 0.1],
            mv_bounds: vec![(0.0, 0.1), (0.0, 0.06)],
            setpoints: Setpoints::constant(vec![h2_setpoint]),
            lm: mpc_lm(),
            warm_start: true,
            integrator: mpc_integrator(),
        }
    }

    pub fn validate(&self, model: &dyn ModelStructure) -> Result<()> {
        if !(self.sampling > 0.0) || !(self.horizon >= self.sampling) {
            return Err(Error::invalid("MPC timing", "need sampling > 0 and horizon >= sampling"));
        }
        if self.q.len() != self.cvs.len() {
            return Err(Error::dimension("CV weights", self.cvs.len(), self.q.len()));
        }
        if self.s.len() != model.n_u() {
            return Err(Error::dimension("move weights", model.n_u(), self.s.len()));
        }
        if self.mv_bounds.len() != model.n_u() {
            return Err(Error::dimension("MV bounds", model.n_u(), self.mv_bounds.len()));
        }
        if self.q.iter().chain(&self.s).any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("MPC weights", "must be >= 0"));
        }
        if self.mv_bounds.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::invalid("MV bounds", "need lo <= hi"));
        }
        self.cv_indices(model)?;
        self.setpoints.validate(self.cvs.len())?;
        self.lm.validate()?;
        self.integrator.validate()
    }

    fn cv_indices(&self, model: &dyn ModelStructure) -> Result<Vec<usize>> {
        self.cvs
            .iter()
            .map(|n| {
                model
                    .names()
                    .outputs
                    .iter()
                    .position(|o| &o.name == n)
                    .ok_or_else(|| Error::Config(format!("CV {n} is not an output of {}", model.id())))
            })
            .collect()
    }

    /// Knots of the control grid relative to now: full sampling intervals
    /// plus a shorter terminal interval when the horizon is not a multiple.
    pub fn control_grid(&self) -> Result<TimeGrid> {
        let n_full = (self.horizon / self.sampling + 1e-9).floor() as usize;
        let mut pts: Vec<f64> = (0..=n_full).map(|i| i as f64 * self.sampling).collect();
        let last = *pts.last().unwrap();
        if self.horizon - last > 1e-9 * self.horizon {
            pts.push(self.horizon);
        }
        TimeGrid::new(pts, TimeUnit::Seconds)
    }

    /// Decision moves per MV: one per full sampling interval.
    pub fn n_moves(&self) -> usize {
        (self.horizon / self.sampling + 1e-9).floor() as usize
    }
}

/// Planned moves, move-major (`moves[i][m]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovePlan {
    pub moves: Vec<Vec<f64>>,
}

impl MovePlan {
    pub fn hold(u: &[f64], n_moves: usize) -> Self {
        Self {
            moves: vec![u.to_vec(); n_moves],
        }
    }

    /// Drops the first move and repeats the last.
    pub fn shifted(&self) -> Self {
        let mut moves: Vec<Vec<f64>> = self.moves[1..].to_vec();
        moves.push(self.moves.last().unwrap().clone());
        Self { moves }
    }

    fn flatten(&self) -> Vec<f64> {
        self.moves.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// `Σ‖z − sp‖²_Q + Σ‖Δu‖²_S` of the returned plan.
    pub cost: f64,
    pub iterations: usize,
    pub termination: Option<Termination>,
    /// The solver failed and the previous MV is held.
    pub fallback: bool,
    pub message: Option<String>,
}

struct OcpProblem<'a> {
    model: &'a dyn ClosedModel,
    plan: SimPlan,
    grid: TimeGrid,
    knot_idx: Vec<usize>,
    x_now: Vec<f64>,
    u_prev: Vec<f64>,
    targets: Vec<Vec<f64>>,
    cv_idx: Vec<usize>,
    sqrt_q: Vec<f64>,
    sqrt_s: Vec<f64>,
    bounds: Vec<(f64, f64)>,
    n_moves: usize,
    n_u: usize,
    integrator: IntegratorConfig,
}

impl OcpProblem<'_> {
    fn profile(&self, theta: &[f64]) -> Result<PiecewiseConstantProfile> {
        let values = (0..self.grid.n_intervals())
            .map(|i| {
                let k = i.min(self.n_moves - 1);
                theta[k * self.n_u..(k + 1) * self.n_u].to_vec()
            })
            .collect();
        PiecewiseConstantProfile::new(self.grid.clone(), values)
    }

    fn run(&self, theta: &[f64], start: usize, buf: &mut [f64]) -> Result<()> {
        let mv = self.profile(theta)?;
        let fl = FluxValues::Map(self.model.fluxes());
        integrate_plan(self.model.structure(), fl, &mv, &self.plan, &self.integrator, start, buf)
    }

    fn nominal(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let n_x = self.x_now.len();
        let mut buf = vec![0.0; self.plan.n_points() * n_x];
        buf[..n_x].copy_from_slice(&self.x_now);
        self.run(theta, 0, &mut buf)?;
        Ok(buf)
    }

    fn residuals_from(&self, theta: &[f64], buf: &[f64]) -> Vec<f64> {
        let structure = self.model.structure();
        let n_x = self.x_now.len();
        let mut z = vec![0.0; structure.n_z()];
        let mut r = Vec::with_capacity(self.targets.len() * self.cv_idx.len() + theta.len());
        for (k, sp) in self.targets.iter().enumerate() {
            let i = self.plan.out_idx[k + 1];
            structure.output(&buf[i * n_x..(i + 1) * n_x], &mut z);
            for (c, &ci) in self.cv_idx.iter().enumerate() {
                r.push(self.sqrt_q[c] * (z[ci] - sp[c]));
            }
        }
        for k in 0..self.n_moves {
            for m in 0..self.n_u {
                let prev = if k == 0 { self.u_prev[m] } else { theta[(k - 1) * self.n_u + m] };
                r.push(self.sqrt_s[m] * (theta[k * self.n_u + m] - prev));
            }
        }
        r
    }
}

impl ResidualProblem for OcpProblem<'_> {
    fn n_params(&self) -> usize {
        self.n_moves * self.n_u
    }

    fn residuals(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let buf = self.nominal(theta)?;
        Ok(self.residuals_from(theta, &buf))
    }

    fn bounds(&self) -> Option<&[(f64, f64)]> {
        Some(&self.bounds)
    }

    /// Forward differences that restart each column's simulation at the knot
    /// where the perturbed move takes effect.
    fn jacobian(&self, theta: &[f64], r: &[f64]) -> Option<Result<DMatrix<f64>>> {
        let buf = match self.nominal(theta) {
            Ok(b) => b,
            Err(e) => return Some(Err(e)),
        };
        let n = theta.len();
        let cols: Result<Vec<Vec<f64>>> = (0..n)
            .into_par_iter()
            .map(|j| {
                let start = self.knot_idx[j / self.n_u];
                let (h0, _) = signed_step(Some(&self.bounds), theta, j);
                let mut last_err = None;
                for h in [h0, -h0] {
                    let mut t = theta.to_vec();
                    t[j] += h;
                    let mut b = buf.clone();
                    match self.run(&t, start, &mut b) {
                        Ok(()) => {
                            let rp = self.residuals_from(&t, &b);
                            return Ok(rp.iter().zip(r).map(|(a, c)| (a - c) / h).collect());
                        }
                        Err(e) => last_err = Some(e),
                    }
                }
                Err(last_err.unwrap())
            })
            .collect();
        Some(cols.map(|cols| DMatrix::from_fn(r.len(), n, |i, j| cols[j][i])))
    }
}

/// One receding-horizon step from `x_now` at time `t_now`. Returns the move to
/// apply, the full optimized plan (for warm starting) and diagnostics. On
/// solver failure the previous MV is held and the step is flagged. A warm
/// start that exhausts the iteration budget is compared against a cold start
/// and the cheaper plan is kept.
pub fn mpc_step(
    model: &dyn ClosedModel,
    x_now: &[f64],
    u_prev: &[f64],
    t_now: f64,
    cfg: &MpcConfig,
    prev_plan: Option<&MovePlan>,
) -> Result<(Vec<f64>, MovePlan, StepDiagnostics)> {
    let structure = model.structure();
    cfg.validate(structure)?;
    if x_now.len() != structure.n_x() || x_now.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("MPC state", format!("need {} finite values", structure.n_x())));
    }
    if u_prev.len() != structure.n_u() {
        return Err(Error::dimension("previous MV", structure.n_u(), u_prev.len()));
    }
    let grid = cfg.control_grid()?;
    let plan = SimPlan::new(&grid, None, &grid, &[], cfg.integrator.max_step)?;
    let knot_idx = grid
        .points()
        .iter()
        .map(|&t| plan.point_index(t).expect("control knots are plan points"))
        .collect();
    let n_moves = cfg.n_moves();
    let n_u = structure.n_u();
    let targets = grid.points()[1..]
        .iter()
        .map(|&t| cfg.setpoints.at(t_now + t).to_vec())
        .collect();
    let bounds: Vec<(f64, f64)> = (0..n_moves).flat_map(|_| cfg.mv_bounds.iter().copied()).collect();
    let problem = OcpProblem {
        model,
        plan,
        grid,
        knot_idx,
        x_now: x_now.to_vec(),
        u_prev: u_prev.to_vec(),
        targets,
        cv_idx: cfg.cv_indices(structure)?,
        sqrt_q: cfg.q.iter().map(|v| v.sqrt()).collect(),
        sqrt_s: cfg.s.iter().map(|v| v.sqrt()).collect(),
        bounds,
        n_moves,
        n_u,
        integrator: cfg.integrator.clone(),
    };
    let cold = MovePlan::hold(u_prev, n_moves);
    let warm = match prev_plan {
        Some(p) if cfg.warm_start && p.moves.len() == n_moves && p.moves.iter().all(|m| m.len() == n_u) => Some(p.shifted()),
        _ => None,
    };
    let solved = match warm {
        None => lm_solve(&problem, &cold.flatten(), &cfg.lm),
        Some(start) => match lm_solve(&problem, &start.flatten(), &cfg.lm) {
            Ok(rep) if rep.cost.is_finite() && rep.termination != Termination::MaxIter => Ok(rep),
            first => match (first, lm_solve(&problem, &cold.flatten(), &cfg.lm)) {
                (Ok(a), Ok(b)) if a.cost.is_finite() && !(b.cost < a.cost) => Ok(a),
                (_, Ok(b)) if b.cost.is_finite() => Ok(b),
                (first, _) => first,
            },
        },
    };
    match solved {
        Ok(rep) if rep.cost.is_finite() => {
            let moves: Vec<Vec<f64>> = rep.theta_opt.chunks(n_u).map(<[f64]>::to_vec).collect();
            let u = moves[0].clone();
            let diag = StepDiagnostics {
                cost: 2.0 * rep.cost,
                iterations: rep.iterations,
                termination: Some(rep.termination),
                fallback: false,
                message: None,
            };
            Ok((u, MovePlan { moves }, diag))
        }
        other => {
            let message = match other {
                Err(e) => e.to_string(),
                Ok(_) => "non-finite OCP cost".into(),
            };
            let u = u_prev
                .iter()
                .zip(&cfg.mv_bounds)
                .map(|(v, (lo, hi))| v.clamp(*lo, *hi))
                .collect::<Vec<_>>();
            let diag = StepDiagnostics {
                cost: f64::NAN,
                iterations: 0,
                termination: None,
                fallback: true,
                message: Some(message),
            };
            Ok((u.clone(), MovePlan::hold(&u, n_moves), diag))
        }
    }
}

/// Additive Gaussian noise on the measured states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementNoise {
    pub std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopRecord {
    pub t: f64,
    pub x: Vec<f64>,
    /// Measured state handed to the controller.
    pub measured: Vec<f64>,
    pub setpoint: Vec<f64>,
    pub u: Vec<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub fallback: bool,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub state_names: Vec<String>,
    pub mv_names: Vec<String>,
    pub cv_names: Vec<String>,
    pub records: Vec<ClosedLoopRecord>,
    /// Final plant state after the last applied move.
    pub final_state: Vec<f64>,
    pub final_time: f64,
    /// Set when the plant integration failed; the log is partial.
    pub aborted: Option<String>,
}

impl ClosedLoopLog {
    pub fn max_wall_time(&self) -> f64 {
        self.records.iter().map(|r| r.wall_time).fold(0.0, f64::max)
    }

    /// Plant states at the sampling instants, including the final one.
    pub fn state_series(&self) -> Vec<(f64, Vec<f64>)> {
        let mut out: Vec<(f64, Vec<f64>)> = self.records.iter().map(|r| (r.t, r.x.clone())).collect();
        if self.aborted.is_none() {
            out.push((self.final_time, self.final_state.clone()));
        }
        out
    }
}

/// Alternates one sampling interval of plant integration with an MPC step on
/// the (optionally noisy) measured state, starting from MV `u0`.
#[allow(clippy::too_many_arguments)]
pub fn closed_loop(
    plant: &dyn ClosedModel,
    plant_integrator: &IntegratorConfig,
    controller: &dyn ClosedModel,
    cfg: &MpcConfig,
    duration: f64,
    x0: &[f64],
    u0: &[f64],
    noise: Option<&MeasurementNoise>,
) -> Result<ClosedLoopLog> {
    let ps = plant.structure();
    let cs = controller.structure();
    cfg.validate(cs)?;
    if ps.n_x() != cs.n_x() || ps.n_u() != cs.n_u() {
        return Err(Error::Config("plant and controller dimensions differ".into()));
    }
    plant_integrator.validate()?;
    let n_steps = (duration / cfg.sampling + 1e-9).floor() as usize;
    let mut rng = noise.map(|n| stream_rng(n.seed, 0xC1));
    let normal = match noise {
        Some(n) => Some(Normal::new(0.0, n.std).map_err(|e| Error::invalid("noise", e.to_string()))?),
        None => None,
    };
    let mut x = x0.to_vec();
    let mut u_prev = u0.to_vec();
    let mut plan: Option<MovePlan> = None;
    let mut records = Vec::with_capacity(n_steps);
    let mut aborted = None;
    let mut t = 0.0;
    for k in 0..n_steps {
        t = k as f64 * cfg.sampling;
        let measured: Vec<f64> = match (&mut rng, &normal) {
            (Some(r), Some(d)) => x.iter().map(|v| v + d.sample(r)).collect(),
            _ => x.clone(),
        };
        let clock = Instant::now();
        let (u, new_plan, diag) = mpc_step(controller, &measured, &u_prev, t, cfg, plan.as_ref())?;
        let wall_time = clock.elapsed().as_secs_f64();
        records.push(ClosedLoopRecord {
            t,
            x: x.clone(),
            measured,
            setpoint: cfg.setpoints.at(t).to_vec(),
            u: u.clone(),
            cost: diag.cost,
            iterations: diag.iterations,
            fallback: diag.fallback,
            wall_time,
        });
        let grid = TimeGrid::new(vec![t, t + cfg.sampling], ps.time_unit())?;
        let mv = PiecewiseConstantProfile::constant(grid.clone(), u.clone());
        match simulate(ps, &x, &mv, Flux::Map(plant.fluxes()), &grid, plant_integrator) {
            Ok(tr) => x = tr.states[1].clone(),
            Err(e) => {
                aborted = Some(e.to_string());
                break;
            }
        }
        t += cfg.sampling;
        u_prev = u;
        plan = Some(new_plan);
    }
    Ok(ClosedLoopLog {
        state_names: ps.names().states.iter().map(|v| v.name.clone()).collect(),
        mv_names: ps.names().inputs.iter().map(|v| v.name.clone()).collect(),
        cv_names: cfg.cvs.clone(),
        records,
        final_state: x,
        final_time: t,
        aborted,
    })
}
