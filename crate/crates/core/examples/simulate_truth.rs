//! Ground-truth simulators: the reactor under a coolant step and the three
//! tanks draining into the reservoir.

use hybrid_ident::model::{ClosedModel, Flux, PiecewiseConstantProfile, TimeGrid, TimeUnit};
use hybrid_ident::sim::{simulate, CstrParams, CstrTruth, IntegratorConfig, TankParams, TankTruth};

fn main() -> hybrid_ident::Result<()> {
    let reactor = CstrTruth::new(CstrParams::default());
    let knots = TimeGrid::new(vec![0.0, 30.0, 60.0], TimeUnit::Minutes)?;
    let mv = PiecewiseConstantProfile::new(knots, vec![vec![0.1, 295.0], vec![0.1, 298.0]])?;
    let out = TimeGrid::with_step(0.0, 60.0, 10.0, TimeUnit::Minutes)?;
    let tr = simulate(reactor.structure(), &[0.65, 0.9, 320.0], &mv, Flux::Map(reactor.fluxes()), &out, &IntegratorConfig::rk4(0.01))?;
    println!("reactor        h          c          T");
    for (t, x) in out.points().iter().zip(&tr.states) {
        println!("{t:5} min {:10.5} {:10.5} {:10.3}", x[0], x[1], x[2]);
    }

    let tanks = TankTruth::new(TankParams::default());
    let q = TankParams::default().steady_inflow_for_h2(1.0);
    let span = TimeGrid::new(vec![0.0, 600.0], TimeUnit::Seconds)?;
    let mv = PiecewiseConstantProfile::constant(span, vec![1.5 * q, 0.0]);
    let out = TimeGrid::with_step(0.0, 600.0, 0.5, TimeUnit::Seconds)?;
    let tr = simulate(&tanks.structure, &[1.0, 1.0, 1.0, 20.0], &mv, Flux::Map(&tanks.fluxes), &out, &IntegratorConfig::rk4(0.5))?;
    let totals: Vec<f64> = tr.states.iter().map(|x| x.iter().sum()).collect();
    let drift = totals.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
    let last = tr.states.last().expect("non-empty trajectory");
    println!("three tanks after 600 s: h1 {:.4} h2 {:.4} h3 {:.4} reservoir {:.4}", last[0], last[1], last[2], last[3]);
    println!("largest change of total holdup per step: {drift:.2e}");
    Ok(())
}
