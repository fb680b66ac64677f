use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::linalg::solve_spd;
use crate::error::{Error, Result};

/// Stacked residual vector `r(θ)` of a least-squares problem `min ½‖r(θ)‖²`.
pub trait ResidualProblem {
    fn n_params(&self) -> usize;

    fn residuals(&self, theta: &[f64]) -> Result<Vec<f64>>;

    /// Per-parameter `[lo, hi]` box.
    fn bounds(&self) -> Option<&[(f64, f64)]> {
        None
    }

    /// Analytic (or structure-aware) Jacobian at `theta`, where `r = residuals(theta)`.
    /// `None` selects forward differences.
    fn jacobian(&self, _theta: &[f64], _r: &[f64]) -> Option<Result<DMatrix<f64>>> {
        None
    }
}

/// Closure-backed problem, mostly for tests and small fits.
pub struct FnProblem<F> {
    pub n_params: usize,
    pub residual_fn: F,
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl<F> FnProblem<F>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    pub fn new(n_params: usize, residual_fn: F) -> Self {
        Self {
            n_params,
            residual_fn,
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, bounds: Vec<(f64, f64)>) -> Self {
        self.bounds = Some(bounds);
        self
    }
}

impl<F> ResidualProblem for FnProblem<F>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    fn n_params(&self) -> usize {
        self.n_params
    }
    fn residuals(&self, theta: &[f64]) -> Result<Vec<f64>> {
        (self.residual_fn)(theta)
    }
    fn bounds(&self) -> Option<&[(f64, f64)]> {
        self.bounds.as_deref()
    }
}

/// Relative forward-difference step for parameter value `v`.
pub fn fd_step(v: f64) -> f64 {
    1e-6 * v.abs().max(1.0)
}

/// Forward differences, stepping backwards where the forward point would
/// leave the box.
pub fn fd_jacobian<P: ResidualProblem + ?Sized>(problem: &P, theta: &[f64], r: &[f64]) -> Result<DMatrix<f64>> {
    let n = theta.len();
    let mut jac = DMatrix::zeros(r.len(), n);
    let mut probe = theta.to_vec();
    for j in 0..n {
        let (mut h, _) = signed_step(problem.bounds(), theta, j);
        probe[j] = theta[j] + h;
        let rp = match problem.residuals(&probe) {
            Ok(rp) => rp,
            Err(_) => {
                h = -h;
                probe[j] = theta[j] + h;
                problem.residuals(&probe)?
            }
        };
        probe[j] = theta[j];
        for (i, (a, b)) in rp.iter().zip(r).enumerate() {
            jac[(i, j)] = (a - b) / h;
        }
    }
    Ok(jac)
}

/// Step for column `j`, negative when the forward probe would cross the upper bound.
pub fn signed_step(bounds: Option<&[(f64, f64)]>, theta: &[f64], j: usize) -> (f64, bool) {
    let h = fd_step(theta[j]);
    match bounds {
        Some(b) if theta[j] + h > b[j].1 => (-h, true),
        _ => (h, false),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub lambda0: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub step_tol: f64,
    pub cost_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            lambda0: 1e-3,
            lambda_up: 10.0,
            lambda_down: 0.1,
            max_iter: 200,
            grad_tol: 1e-8,
            step_tol: 1e-10,
            cost_tol: 1e-12,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lambda0, self.lambda_up, self.lambda_down, self.grad_tol, self.step_tol, self.cost_tol];
        if positive.iter().any(|v| !(*v > 0.0)) || self.max_iter == 0 {
            return Err(Error::invalid("LM config", "all settings must be positive"));
        }
        if !(self.lambda_down < 1.0 && self.lambda_up > 1.0) {
            return Err(Error::invalid("LM config", "need lambda_down < 1 < lambda_up"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Gradient,
    Step,
    Cost,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub theta_opt: Vec<f64>,
    /// `½‖r‖²` at `theta_opt`.
    pub cost: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Initial cost followed by the cost after every accepted step.
    pub cost_history: Vec<f64>,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

const LAMBDA_MAX: f64 = 1e16;

fn project(theta: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(b) = bounds {
        for (t, (lo, hi)) in theta.iter_mut().zip(b) {
            *t = t.clamp(*lo, *hi);
        }
    }
}

fn half_sq(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

/// Scale-free stationarity measure: the largest cosine between the residual
/// and a Jacobian column, ignoring components pinned at a bound by a gradient
/// that points out of the box.
fn projected_gradient_cosine(jac: &DMatrix<f64>, g: &DVector<f64>, r: &[f64], theta: &[f64], bounds: Option<&[(f64, f64)]>) -> f64 {
    let r_norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if r_norm == 0.0 {
        return 0.0;
    }
    let mut worst: f64 = 0.0;
    for j in 0..theta.len() {
        if let Some(b) = bounds {
            let (lo, hi) = b[j];
            // descent direction is −g
            if (theta[j] <= lo && g[j] > 0.0) || (theta[j] >= hi && g[j] < 0.0) {
                continue;
            }
        }
        let col_norm = jac.column(j).norm();
        if col_norm > 0.0 {
            worst = worst.max(g[j].abs() / (col_norm * r_norm));
        }
    }
    worst
}

/// Box-constrained Levenberg–Marquardt with Marquardt (diagonal) damping.
/// Trial points are clamped to the box before evaluation; a trial whose
/// residual evaluation fails counts as a rejected step.
pub fn lm_solve<P: ResidualProblem + ?Sized>(problem: &P, theta0: &[f64], cfg: &LmConfig) -> Result<LmReport> {
    cfg.validate()?;
    let n = problem.n_params();
    if theta0.len() != n {
        return Err(Error::dimension("initial parameters", n, theta0.len()));
    }
    let bounds = problem.bounds();
    if let Some(b) = bounds {
        if b.len() != n || b.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::invalid("bounds", "need one [lo, hi] with lo <= hi per parameter"));
        }
    }
    let mut theta = theta0.to_vec();
    project(&mut theta, bounds);
    let mut r = problem
        .residuals(&theta)
        .map_err(|e| Error::Estimation(format!("residuals fail at the initial point: {e}")))?;
    if r.is_empty() {
        return Err(Error::invalid("residual problem", "needs at least one residual"));
    }
    let mut cost = half_sq(&r);
    if !cost.is_finite() {
        return Err(Error::Estimation("non-finite initial cost".into()));
    }
    let mut history = vec![cost];
    let mut lambda = cfg.lambda0;
    let mut iterations = 0;

    let termination = loop {
        let jac = match problem.jacobian(&theta, &r) {
            Some(j) => j?,
            None => fd_jacobian(problem, &theta, &r)?,
        };
        let rv = DVector::from_column_slice(&r);
        let g = jac.tr_mul(&rv);
        if projected_gradient_cosine(&jac, &g, &r, &theta, bounds) <= cfg.grad_tol {
            break Termination::Gradient;
        }
        if iterations >= cfg.max_iter {
            break Termination::MaxIter;
        }
        iterations += 1;
        let jtj = jac.tr_mul(&jac);
        let max_diag = jtj.diagonal().max();
        let floor = if max_diag > 0.0 { 1e-12 * max_diag } else { 1.0 };
        let diag: Vec<f64> = jtj.diagonal().iter().map(|d| d.max(floor)).collect();

        let mut accepted = None;
        while lambda <= LAMBDA_MAX {
            let mut a = jtj.clone();
            for (i, d) in diag.iter().enumerate() {
                a[(i, i)] += lambda * d;
            }
            let delta = match solve_spd(&a, &(-&g)) {
                Ok(d) => d,
                Err(_) => {
                    lambda *= cfg.lambda_up;
                    continue;
                }
            };
            let mut trial: Vec<f64> = theta.iter().zip(delta.iter()).map(|(t, d)| t + d).collect();
            project(&mut trial, bounds);
            let step_norm = trial.iter().zip(&theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let theta_norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if step_norm <= cfg.step_tol * (theta_norm + cfg.step_tol) {
                break;
            }
            if let Ok(rt) = problem.residuals(&trial) {
                let ct = half_sq(&rt);
                if ct.is_finite() && ct < cost {
                    accepted = Some((trial, rt, ct, step_norm, theta_norm));
                    lambda = (lambda * cfg.lambda_down).max(1e-16);
                    break;
                }
            }
            lambda *= cfg.lambda_up;
        }

        let Some((trial, rt, ct, step_norm, theta_norm)) = accepted else {
            break Termination::Step;
        };
        let decrease = cost - ct;
        theta = trial;
        r = rt;
        cost = ct;
        history.push(cost);
        if decrease <= cfg.cost_tol * history[history.len() - 2] {
            break Termination::Cost;
        }
        if step_norm <= cfg.step_tol * (theta_norm + cfg.step_tol) {
            break Termination::Step;
        }
    };

    Ok(LmReport {
        theta_opt: theta,
        cost,
        iterations,
        termination,
        cost_history: history,
        residuals: r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> FnProblem<impl Fn(&[f64]) -> Result<Vec<f64>>> {
        FnProblem::new(2, |t: &[f64]| Ok(vec![t[0] - 1.0, 2.0 * t[1] - 2.0]))
    }

    fn rosenbrock(t: &[f64]) -> Result<Vec<f64>> {
        Ok(vec![1.0 - t[0], 10.0 * (t[1] - t[0] * t[0])])
    }

    #[test]
    fn linear_residual_solves_exactly() {
        let rep = lm_solve(&linear(), &[0.0, 0.0], &LmConfig::default()).unwrap();
        assert!((rep.theta_opt[0] - 1.0).abs() < 1e-8);
        assert!((rep.theta_opt[1] - 1.0).abs() < 1e-8);
        assert!(rep.cost < 1e-16);
    }

    #[test]
    fn rosenbrock_converges() {
        let rep = lm_solve(&FnProblem::new(2, rosenbrock), &[-1.2, 1.0], &LmConfig::default()).unwrap();
        assert!((rep.theta_opt[0] - 1.0).abs() < 1e-6, "{rep:?}");
        assert!((rep.theta_opt[1] - 1.0).abs() < 1e-6, "{rep:?}");
    }

    #[test]
    fn box_constrained_optimum_matches_grid_search() {
        // brute force over the box at resolution 1e-3
        let f = |a: f64, b: f64| (a - 1.0).powi(2) + (2.0 * b - 2.0).powi(2);
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=500 {
            for j in 0..=500 {
                let (a, b) = (i as f64 * 1e-3, j as f64 * 1e-3);
                let v = f(a, b);
                if v < best.0 {
                    best = (v, a, b);
                }
            }
        }
        let p = linear().with_bounds(vec![(0.0, 0.5); 2]);
        let rep = lm_solve(&p, &[0.1, 0.1], &LmConfig::default()).unwrap();
        assert!((rep.theta_opt[0] - best.1).abs() <= 1e-3);
        assert!((rep.theta_opt[1] - best.2).abs() <= 1e-3);
        assert_eq!(rep.termination, Termination::Gradient);
    }

    #[test]
    fn infeasible_start_is_projected() {
        let p = linear().with_bounds(vec![(0.0, 0.5); 2]);
        let rep = lm_solve(&p, &[7.0, -3.0], &LmConfig::default()).unwrap();
        assert_eq!(rep.theta_opt, vec![0.5, 0.5]);
    }

    #[test]
    fn failing_trials_are_rejected() {
        // residual undefined for θ > 0.6: LM must stay on the admissible side
        let p = FnProblem::new(1, |t: &[f64]| {
            if t[0] > 0.6 {
                Err(Error::Domain { t: 0.0, reason: "out".into() })
            } else {
                Ok(vec![t[0] - 1.0])
            }
        });
        let rep = lm_solve(&p, &[0.0], &LmConfig::default()).unwrap();
        assert!(rep.theta_opt[0] <= 0.6);
        assert!(rep.cost_history.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn failing_initial_point_is_unrecoverable() {
        let p = FnProblem::new(1, |_: &[f64]| -> Result<Vec<f64>> { Err(Error::Domain { t: 0.0, reason: "x".into() }) });
        assert!(lm_solve(&p, &[0.0], &LmConfig::default()).is_err());
    }

    #[test]
    fn perfect_guess_needs_no_iterations() {
        let rep = lm_solve(&linear(), &[1.0, 1.0], &LmConfig::default()).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(rep.termination, Termination::Gradient);
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = LmConfig { lambda_down: 2.0, ..LmConfig::default() };
        assert!(lm_solve(&linear(), &[0.0, 0.0], &cfg).is_err());
    }

    #[test]
    fn fd_jacobian_matches_analytic_on_quadratic() {
        // r(θ) = (θ0² + θ1, 3θ0θ1 − 1, θ1²)
        let p = FnProblem::new(2, |t: &[f64]| Ok(vec![t[0] * t[0] + t[1], 3.0 * t[0] * t[1] - 1.0, t[1] * t[1]]));
        let theta = [1.3, -0.7];
        let r = p.residuals(&theta).unwrap();
        let fd = fd_jacobian(&p, &theta, &r).unwrap();
        let exact = DMatrix::from_row_slice(3, 2, &[2.0 * 1.3, 1.0, 3.0 * -0.7, 3.0 * 1.3, 0.0, 2.0 * -0.7]);
        for (a, b) in fd.iter().zip(exact.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
