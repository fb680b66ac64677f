//! The bounded Levenberg-Marquardt solver on two classic problems.

use hybrid_ident::nls::{lm_solve, FnProblem, LmConfig};
use hybrid_ident::Result;

fn main() -> Result<()> {
    let cfg = LmConfig {
        grad_tol: 1e-14,
        step_tol: 1e-15,
        cost_tol: 1e-20,
        max_iter: 500,
        ..LmConfig::default()
    };
    let rosen = FnProblem::new(2, |th: &[f64]| -> Result<Vec<f64>> { Ok(vec![10.0 * (th[1] - th[0] * th[0]), 1.0 - th[0]]) });
    let rep = lm_solve(&rosen, &[-1.2, 1.0], &cfg)?;
    println!("Rosenbrock: {:?} after {} iterations ({:?})", rep.theta_opt, rep.iterations, rep.termination);

    let ts: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
    let ys: Vec<f64> = ts.iter().map(|t| 2.5 * (-0.7 * t).exp() + 0.3).collect();
    let decay = FnProblem::new(3, |th: &[f64]| -> Result<Vec<f64>> {
        Ok(ts.iter().zip(&ys).map(|(t, y)| th[0] * (-th[1] * t).exp() + th[2] - y).collect())
    })
    .with_bounds(vec![(0.0, 10.0), (0.0, 0.5), (-1.0, 1.0)]);
    let rep = lm_solve(&decay, &[1.0, 0.1, 0.0], &cfg)?;
    println!("decay rate bounded by 0.5: {:?}, cost {:.4e}", rep.theta_opt, rep.cost);
    Ok(())
}
