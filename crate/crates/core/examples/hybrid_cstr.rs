//! The full identification in memory: estimate, screen, train, assemble, then
//! compare the hybrid reactor with the truth on an unseen MV profile.

use std::collections::BTreeMap;
use std::sync::Arc;

use hybrid_ident::analyze::{build_flux_table, correlate, AnalysisConfig};
use hybrid_ident::estimate::{estimate_all, EstimationConfig};
use hybrid_ident::hybrid::{assemble_hybrid, evaluate_hybrid, simulate_hybrid};
use hybrid_ident::mlp::{train_mlp, MlpSpec, TrainConfig};
use hybrid_ident::model::{ClosedModel, Flux, ModelStructure, TimeGrid, TimeUnit};
use hybrid_ident::sim::{generate_pseudo_data, simulate, CstrParams, CstrScenarioDesign, CstrStructure, CstrTruth, IntegratorConfig, Noise};

fn main() -> hybrid_ident::Result<()> {
    let params = CstrParams::default();
    let design = CstrScenarioDesign {
        span: 600.0,
        ..CstrScenarioDesign::default()
    };
    let truth = CstrTruth::new(params.clone());
    let integ = IntegratorConfig::rk4(0.01);
    let data = generate_pseudo_data(&truth, &design.scenarios(&params, 4, 7)?, 1.0, &Noise::relative(0.02), 7, &integ)?;
    let base: Arc<dyn ModelStructure> = Arc::new(CstrStructure::default());

    let results = estimate_all(base.as_ref(), &data, &EstimationConfig::default())?;
    let table = build_flux_table(&results, base.as_ref())?;
    let report = correlate(&table, &AnalysisConfig::default())?;

    let cfg = TrainConfig {
        epochs: 1000,
        ..TrainConfig::default()
    };
    let mut nets = BTreeMap::new();
    let mut constants = BTreeMap::new();
    for sel in &report.selected_inputs {
        if sel.inputs.is_empty() {
            let c = report.constant(&sel.flux).expect("flagged constant");
            println!("{}: constant {}", sel.flux, c.value);
            constants.insert(sel.flux.clone(), c.value);
        } else {
            let spec = MlpSpec::tanh_linear(sel.inputs.len(), 1);
            let (net, rep) = train_mlp(&table, &sel.flux, &sel.inputs, &spec, &cfg)?;
            println!("{} <- {:?}: validation mse {:.3e}", sel.flux, sel.inputs, rep.val_mse.unwrap_or(f64::NAN));
            nets.insert(sel.flux.clone(), net);
        }
    }
    let hm = assemble_hybrid(base, &report, &nets, &constants)?;
    let eval = evaluate_hybrid(&hm, &data, &results, &integ);
    println!("hybrid fit on the training runs {:.4e}, {} failed", eval.total_fit(), eval.n_failed());

    let held_out = CstrScenarioDesign {
        span: 120.0,
        ..CstrScenarioDesign::default()
    }
    .scenario(&params, 7, 1000)?;
    let grid = TimeGrid::with_step(0.0, 120.0, 10.0, TimeUnit::Minutes)?;
    let tt = simulate(truth.structure(), &held_out.x0, &held_out.mv, Flux::Map(truth.fluxes()), &grid, &integ)?;
    let th = simulate_hybrid(&hm, &held_out.x0, &held_out.mv, &grid, &integ)?;
    println!("\n  t [min]   c truth  c hybrid    T truth  T hybrid");
    for (k, t) in grid.points().iter().enumerate() {
        println!("{t:9} {:9.4} {:9.4} {:10.3} {:9.3}", tt.states[k][1], th.states[k][1], tt.states[k][2], th.states[k][2]);
    }
    Ok(())
}
