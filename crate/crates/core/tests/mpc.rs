use hybrid_ident::model::{Flux, PiecewiseConstantProfile, TimeGrid, TimeUnit};
use hybrid_ident::mpc::{closed_loop, mpc_step, ClosedLoopLog, MeasurementNoise, MpcConfig, MovePlan, Setpoints};
use hybrid_ident::sim::{simulate, IntegratorConfig, TankParams, TankTruth};

const H0: f64 = 1.0;
const H1: f64 = 1.5;
const T_STEP: f64 = 16.0;

fn steady(h2: f64) -> (Vec<f64>, Vec<f64>) {
    let q = TankParams::default();
    (vec![h2, h2, h2, 20.0], vec![q.steady_inflow_for_h2(h2), 0.0])
}

fn step_config() -> MpcConfig {
    MpcConfig {
        setpoints: Setpoints::step(vec![H0], vec![H1], T_STEP),
        ..MpcConfig::three_tank(H0)
    }
}

fn within_bounds(log: &ClosedLoopLog, cfg: &MpcConfig) -> bool {
    log.records
        .iter()
        .all(|r| r.u.iter().zip(&cfg.mv_bounds).all(|(u, (lo, hi))| *lo <= *u && *u <= *hi))
}

#[test]
fn perfect_model_tracks_a_level_step() {
    let truth = TankTruth::new(TankParams::default());
    let cfg = step_config();
    let (x0, u0) = steady(H0);
    let log = closed_loop(&truth, &IntegratorConfig::rk4(0.5), &truth, &cfg, 1200.0, &x0, &u0, None).unwrap();
    assert!(log.aborted.is_none());
    assert!(within_bounds(&log, &cfg));
    assert!(log.max_wall_time() <= 1.0, "{}", log.max_wall_time());

    let band = 0.01 * (H1 - H0);
    let series = log.state_series();
    let entered = series
        .iter()
        .position(|(t, x)| *t >= T_STEP && (x[1] - H1).abs() <= band)
        .expect("enters the 1% band");
    assert!(series[entered].0 - T_STEP <= 600.0, "entered at {}", series[entered].0);
    assert!(series[entered..].iter().all(|(_, x)| (x[1] - H1).abs() <= band));
    assert!(log.records.iter().all(|r| !r.fallback));
}

#[test]
fn steady_plant_stays_put_for_100_steps() {
    let truth = TankTruth::new(TankParams::default());
    let cfg = MpcConfig::three_tank(H0);
    let (x0, u0) = steady(H0);
    let log = closed_loop(&truth, &IntegratorConfig::rk4(0.5), &truth, &cfg, 100.0 * cfg.sampling, &x0, &u0, None).unwrap();
    assert_eq!(log.records.len(), 100);
    for r in &log.records {
        assert!((r.u[0] - u0[0]).abs() <= 1e-6 && (r.u[1] - u0[1]).abs() <= 1e-6, "{:?}", r.u);
        for (a, b) in r.x.iter().zip(&x0) {
            assert!((a - b).abs() <= 1e-8);
        }
    }
}

#[test]
fn warm_start_is_never_worse_than_cold_start() {
    let truth = TankTruth::new(TankParams::default());
    let cfg = step_config();
    let (mut x, mut u) = steady(H0);
    let mut plan: Option<MovePlan> = None;
    let plant = IntegratorConfig::rk4(0.5);
    for k in 0..12 {
        let t = k as f64 * cfg.sampling;
        let (u_warm, plan_warm, warm) = mpc_step(&truth, &x, &u, t, &cfg, plan.as_ref()).unwrap();
        let (_, _, cold) = mpc_step(&truth, &x, &u, t, &cfg, None).unwrap();
        assert!(warm.cost <= cold.cost + 1e-9, "step {k}: warm {} cold {}", warm.cost, cold.cost);
        let grid = TimeGrid::new(vec![t, t + cfg.sampling], TimeUnit::Seconds).unwrap();
        let mv = PiecewiseConstantProfile::constant(grid.clone(), u_warm.clone());
        let tr = simulate(&truth.structure, &x, &mv, Flux::Map(&truth.fluxes), &grid, &plant).unwrap();
        x = tr.states.last().unwrap().clone();
        u = u_warm;
        plan = Some(plan_warm);
    }
}

#[test]
fn unreachable_setpoint_pins_the_inflow() {
    let truth = TankTruth::new(TankParams::default());
    let cfg = MpcConfig::three_tank(10.0);
    let (x0, u0) = steady(H0);
    let log = closed_loop(&truth, &IntegratorConfig::rk4(0.5), &truth, &cfg, 160.0, &x0, &u0, None).unwrap();
    assert!(within_bounds(&log, &cfg));
    assert!(log.records[2..].iter().all(|r| r.u[0] == cfg.mv_bounds[0].1));
}

#[test]
fn noisy_loops_are_reproducible() {
    let truth = TankTruth::new(TankParams::default());
    let cfg = step_config();
    let (x0, u0) = steady(H0);
    let noise = MeasurementNoise { std: 0.005, seed: 4 };
    let strip = |mut log: ClosedLoopLog| {
        log.records.iter_mut().for_each(|r| r.wall_time = 0.0);
        log
    };
    let run = || closed_loop(&truth, &IntegratorConfig::rk4(0.5), &truth, &cfg, 160.0, &x0, &u0, Some(&noise)).unwrap();
    let a = strip(run());
    let b = strip(run());
    assert_eq!(a, b);
    assert!(a.records.iter().any(|r| r.measured != r.x));
    assert!(within_bounds(&a, &cfg));
}

#[test]
fn record_times_follow_the_sampling_grid() {
    let truth = TankTruth::new(TankParams::default());
    let cfg = MpcConfig::three_tank(H0);
    let (x0, u0) = steady(H0);
    let log = closed_loop(&truth, &IntegratorConfig::rk4(0.5), &truth, &cfg, 80.0, &x0, &u0, None).unwrap();
    for (k, r) in log.records.iter().enumerate() {
        assert_eq!(r.t, k as f64 * cfg.sampling);
    }
    assert_eq!(log.final_time, 80.0);
}
