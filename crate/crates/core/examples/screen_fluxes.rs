//! Steps 2 and 3: stack the estimates into a flux table and pick network
//! inputs by Pearson correlation.

use hybrid_ident::analyze::{build_flux_table, correlate, AnalysisConfig};
use hybrid_ident::estimate::{estimate_all, EstimationConfig};
use hybrid_ident::sim::{generate_pseudo_data, CstrParams, CstrScenarioDesign, CstrStructure, CstrTruth, IntegratorConfig, Noise};

fn main() -> hybrid_ident::Result<()> {
    let params = CstrParams::default();
    let design = CstrScenarioDesign {
        span: 600.0,
        ..CstrScenarioDesign::default()
    };
    let scenarios = design.scenarios(&params, 3, 21)?;
    let truth = CstrTruth::new(params);
    let data = generate_pseudo_data(&truth, &scenarios, 1.0, &Noise::relative(0.02), 21, &IntegratorConfig::rk4(0.01))?;
    let model = CstrStructure::default();
    let results = estimate_all(&model, &data, &EstimationConfig::default())?;
    let table = build_flux_table(&results, &model)?;
    println!("flux table: {} rows, {} columns", table.n_rows(), table.columns.len());

    let report = correlate(&table, &AnalysisConfig::default())?;
    let m = &report.matrix;
    print!("{:>6}", "");
    for l in &m.labels {
        print!("{l:>7}");
    }
    println!();
    for (l, row) in m.labels.iter().zip(&m.values) {
        print!("{l:>6}");
        for v in row {
            print!("{v:7.3}");
        }
        println!();
    }
    println!("\nscreening at tau = {}", report.tau);
    for sel in &report.selected_inputs {
        match report.constant(&sel.flux) {
            Some(c) if sel.inputs.is_empty() => println!("  {}: constant {} (mean {:.2e})", sel.flux, c.value, c.mean),
            _ => println!("  {} <- {:?}", sel.flux, sel.inputs),
        }
    }
    Ok(())
}
