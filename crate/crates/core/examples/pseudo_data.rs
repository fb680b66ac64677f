//! Noisy measurement campaigns from randomized MV profiles, written in the
//! CSV layout the command-line stages exchange.

use hybrid_ident::cli::files::{write_dataset, Stamp};
use hybrid_ident::model::ModelStructure;
use hybrid_ident::sim::{generate_pseudo_data, CstrParams, CstrScenarioDesign, CstrStructure, CstrTruth, IntegratorConfig, Noise};

fn main() -> hybrid_ident::Result<()> {
    let params = CstrParams::default();
    let design = CstrScenarioDesign {
        span: 240.0,
        ..CstrScenarioDesign::default()
    };
    let scenarios = design.scenarios(&params, 3, 7)?;
    let truth = CstrTruth::new(params);
    let data = generate_pseudo_data(&truth, &scenarios, 1.0, &Noise::relative(0.02), 7, &IntegratorConfig::rk4(0.01))?;

    let dir = std::env::temp_dir().join("hybrid-ident-pseudo-data");
    let model = CstrStructure::default();
    let names = model.names();
    let stamp = Stamp {
        config_hash: "0".repeat(64),
        seed: 7,
    };
    for ds in &data {
        write_dataset(&dir, ds, &names.outputs, &names.inputs, &stamp)?;
        println!("{}: {} samples of {:?}, {} MV intervals", ds.name, ds.n_meas(), ds.output_labels, ds.mv.n_intervals());
    }
    let head: Vec<String> = std::fs::read_to_string(dir.join("dataset_00.csv"))
        .expect("dataset written")
        .lines()
        .take(8)
        .map(str::to_string)
        .collect();
    println!("{}\n...", head.join("\n"));
    println!("written to {}", dir.display());
    Ok(())
}
