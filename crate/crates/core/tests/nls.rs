use hybrid_ident::nls::{lm_solve, solve_spd, FnProblem, LmConfig, ResidualProblem};
use hybrid_ident::Result;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tight() -> LmConfig {
    LmConfig {
        grad_tol: 1e-14,
        step_tol: 1e-15,
        cost_tol: 1e-20,
        max_iter: 500,
        ..LmConfig::default()
    }
}

fn random_system(seed: u64, m: usize, n: usize) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let b = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
    (a, b)
}

#[test]
fn linear_least_squares_matches_normal_equations() {
    let (a, b) = random_system(1, 30, 5);
    let exact = (a.transpose() * &a).cholesky().unwrap().solve(&(a.transpose() * &b));
    let problem = FnProblem::new(5, |th: &[f64]| -> Result<Vec<f64>> {
        let x = DVector::from_column_slice(th);
        Ok((&a * x - &b).iter().copied().collect())
    });
    let rep = lm_solve(&problem, &[0.0; 5], &tight()).unwrap();
    for (x, e) in rep.theta_opt.iter().zip(exact.iter()) {
        assert!((x - e).abs() <= 1e-8, "{x} vs {e}");
    }
}

#[test]
fn rosenbrock_converges_to_the_minimum() {
    let problem = FnProblem::new(2, |th: &[f64]| -> Result<Vec<f64>> {
        Ok(vec![10.0 * (th[1] - th[0] * th[0]), 1.0 - th[0]])
    });
    let rep = lm_solve(&problem, &[-1.2, 1.0], &tight()).unwrap();
    assert!((rep.theta_opt[0] - 1.0).abs() <= 1e-6);
    assert!((rep.theta_opt[1] - 1.0).abs() <= 1e-6);
}

#[test]
fn exponential_fit_recovers_parameters() {
    let ts: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
    let ys: Vec<f64> = ts.iter().map(|t| 2.5 * (-0.7 * t).exp() + 0.3).collect();
    let problem = FnProblem::new(3, |th: &[f64]| -> Result<Vec<f64>> {
        Ok(ts.iter().zip(&ys).map(|(t, y)| th[0] * (-th[1] * t).exp() + th[2] - y).collect())
    });
    let rep = lm_solve(&problem, &[1.0, 0.1, 0.0], &tight()).unwrap();
    for (x, e) in rep.theta_opt.iter().zip([2.5, 0.7, 0.3]) {
        assert!((x - e).abs() <= 1e-7, "{x} vs {e}");
    }
}

#[test]
fn bounds_are_respected_at_the_solution() {
    let problem = FnProblem::new(2, |th: &[f64]| -> Result<Vec<f64>> { Ok(vec![th[0] - 3.0, th[1] + 2.0]) })
        .with_bounds(vec![(0.0, 1.0), (-1.0, 1.0)]);
    let rep = lm_solve(&problem, &[0.5, 0.0], &LmConfig::default()).unwrap();
    assert!((rep.theta_opt[0] - 1.0).abs() <= 1e-9);
    assert!((rep.theta_opt[1] + 1.0).abs() <= 1e-9);
}

#[test]
fn cost_history_never_increases() {
    let problem = FnProblem::new(2, |th: &[f64]| -> Result<Vec<f64>> {
        Ok(vec![10.0 * (th[1] - th[0] * th[0]), 1.0 - th[0]])
    });
    let rep = lm_solve(&problem, &[-1.2, 1.0], &LmConfig::default()).unwrap();
    assert!(rep.cost_history.windows(2).all(|w| w[1] <= w[0]));
    assert_eq!(*rep.cost_history.last().unwrap(), rep.cost);
}

#[test]
fn wrong_initial_length_is_rejected() {
    let problem = FnProblem::new(2, |th: &[f64]| -> Result<Vec<f64>> { Ok(th.to_vec()) });
    assert!(lm_solve(&problem, &[0.0; 3], &LmConfig::default()).is_err());
    assert_eq!(problem.n_params(), 2);
}

#[test]
fn spd_solve_has_small_residual() {
    let (m, b) = random_system(2, 12, 12);
    let a = m.transpose() * &m + DMatrix::identity(12, 12);
    let x = solve_spd(&a, &b).unwrap();
    assert!((&a * x - &b).norm() <= 1e-10);
}

#[test]
fn indefinite_matrix_is_rejected() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(solve_spd(&a, &DVector::from_vec(vec![1.0, 1.0])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn spd_solutions_satisfy_the_system(seed in 0u64..10_000, n in 1usize..10) {
        let (m, b) = random_system(seed, n, n);
        let a = m.transpose() * &m + DMatrix::identity(n, n) * 0.1;
        let x = solve_spd(&a, &b).unwrap();
        prop_assert!((&a * x - &b).norm() <= 1e-10 * b.norm().max(1.0));
    }

    #[test]
    fn least_squares_solution_is_optimal(seed in 0u64..10_000) {
        let (a, b) = random_system(seed, 12, 3);
        let problem = FnProblem::new(3, |th: &[f64]| -> Result<Vec<f64>> {
            Ok((&a * DVector::from_column_slice(th) - &b).iter().copied().collect())
        });
        let rep = lm_solve(&problem, &[0.0; 3], &tight()).unwrap();
        let x = DVector::from_vec(rep.theta_opt.clone());
        let grad = a.transpose() * (&a * x - &b);
        prop_assert!(grad.norm() <= 1e-8);
    }
}
