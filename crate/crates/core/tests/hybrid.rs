use std::collections::BTreeMap;
use std::sync::Arc;

use hybrid_ident::analyze::{build_flux_table, correlate, AnalysisConfig};
use hybrid_ident::estimate::{estimate_all, EstimationConfig};
use hybrid_ident::hybrid::{assemble_hybrid, evaluate_hybrid, simulate_hybrid, FluxBinding, HybridManifest, HybridModel};
use hybrid_ident::mlp::{train_mlp, Mlp, MlpSpec, TrainConfig};
use hybrid_ident::model::{ModelStructure, PiecewiseConstantProfile, TimeGrid, TimeUnit};
use hybrid_ident::sim::{
    generate_pseudo_data, CstrParams, CstrScenarioDesign, CstrStructure, CstrTruth, IntegratorConfig, Noise,
    TankStructure,
};

struct Identified {
    hm: HybridModel,
    eval_total: f64,
    n_failed: usize,
    step1_total: f64,
}

fn identify() -> Identified {
    let params = CstrParams::default();
    let design = CstrScenarioDesign {
        span: 600.0,
        ..CstrScenarioDesign::default()
    };
    let scenarios = design.scenarios(&params, 3, 31).unwrap();
    let truth = CstrTruth::new(params);
    let data = generate_pseudo_data(&truth, &scenarios, 1.0, &Noise::relative(0.02), 31, &IntegratorConfig::rk4(0.01)).unwrap();
    let base: Arc<dyn ModelStructure> = Arc::new(CstrStructure::default());
    let results = estimate_all(base.as_ref(), &data, &EstimationConfig::default()).unwrap();
    let table = build_flux_table(&results, base.as_ref()).unwrap();
    let report = correlate(&table, &AnalysisConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 500,
        ..TrainConfig::default()
    };
    let mut trained = BTreeMap::new();
    let mut constants = BTreeMap::new();
    for sel in &report.selected_inputs {
        if sel.inputs.is_empty() {
            constants.insert(sel.flux.clone(), report.constant(&sel.flux).unwrap().value);
        } else {
            let spec = MlpSpec::tanh_linear(sel.inputs.len(), 1);
            let (net, _) = train_mlp(&table, &sel.flux, &sel.inputs, &spec, &cfg).unwrap();
            trained.insert(sel.flux.clone(), net);
        }
    }
    let hm = assemble_hybrid(base, &report, &trained, &constants).unwrap();
    let eval = evaluate_hybrid(&hm, &data, &results, &IntegratorConfig::rk4(0.1));
    Identified {
        eval_total: eval.total_fit(),
        n_failed: eval.n_failed(),
        step1_total: results.iter().map(|r| r.fit_cost).sum(),
        hm,
    }
}

#[test]
fn identified_reactor_model_simulates_every_dataset() {
    let id = identify();
    assert_eq!(id.n_failed, 0);
    assert!(id.eval_total.is_finite());
    assert!(id.eval_total >= id.step1_total * 0.5);
    let kinds: Vec<&str> = id
        .hm
        .bindings()
        .iter()
        .map(|b| match b {
            FluxBinding::Constant { .. } => "const",
            FluxBinding::Mlp { .. } => "mlp",
        })
        .collect();
    assert_eq!(kinds, ["const", "mlp", "mlp"]);
}

#[test]
fn manifest_file_reproduces_simulation_exactly() {
    let id = identify();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    id.hm.manifest().save(&path).unwrap();
    let back = HybridManifest::load(&path).unwrap().into_model(Arc::new(CstrStructure::default())).unwrap();
    let grid = TimeGrid::with_step(0.0, 120.0, 1.0, TimeUnit::Minutes).unwrap();
    let mv = PiecewiseConstantProfile::constant(TimeGrid::new(vec![0.0, 120.0], TimeUnit::Minutes).unwrap(), vec![0.1, 295.0]);
    let x0 = [0.65, 0.9, 320.0];
    let cfg = IntegratorConfig::rk4(0.1);
    let a = simulate_hybrid(&id.hm, &x0, &mv, &grid, &cfg).unwrap();
    let b = simulate_hybrid(&back, &x0, &mv, &grid, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(HybridManifest::load(&path).unwrap().into_model(Arc::new(TankStructure::default())).is_err());
}

#[test]
fn assembly_rejects_bindings_that_disagree_with_screening() {
    let params = CstrParams::default();
    let design = CstrScenarioDesign {
        span: 240.0,
        ..CstrScenarioDesign::default()
    };
    let truth = CstrTruth::new(params.clone());
    let data = generate_pseudo_data(&truth, &design.scenarios(&params, 2, 3).unwrap(), 1.0, &Noise::relative(0.02), 3, &IntegratorConfig::rk4(0.01)).unwrap();
    let base: Arc<dyn ModelStructure> = Arc::new(CstrStructure::default());
    let results = estimate_all(base.as_ref(), &data, &EstimationConfig::default()).unwrap();
    let table = build_flux_table(&results, base.as_ref()).unwrap();
    let report = correlate(&table, &AnalysisConfig::default()).unwrap();

    let mut wrong = Mlp::init(&MlpSpec::tanh_linear(1, 0)).unwrap();
    wrong.input_names = vec!["h".into()];
    let trained = BTreeMap::from([("p2".to_string(), wrong.clone()), ("p3".to_string(), wrong)]);
    let constants = BTreeMap::from([("p1".to_string(), 0.0)]);
    assert!(assemble_hybrid(base.clone(), &report, &trained, &constants).is_err());

    let all_const = BTreeMap::from([("p1".to_string(), 0.0), ("p2".to_string(), 0.0), ("p3".to_string(), 0.0)]);
    assert!(assemble_hybrid(base.clone(), &report, &BTreeMap::new(), &all_const).is_ok());
    let missing = BTreeMap::from([("p1".to_string(), 0.0)]);
    assert!(assemble_hybrid(base.clone(), &report, &BTreeMap::new(), &missing).is_err());
    let foreign = BTreeMap::from([("q".to_string(), 0.0)]);
    assert!(assemble_hybrid(base, &report, &BTreeMap::new(), &foreign).is_err());
}

#[test]
fn failing_datasets_are_recorded_not_fatal() {
    let params = CstrParams::default();
    let design = CstrScenarioDesign {
        span: 120.0,
        ..CstrScenarioDesign::default()
    };
    let truth = CstrTruth::new(params.clone());
    let data = generate_pseudo_data(&truth, &design.scenarios(&params, 2, 5).unwrap(), 1.0, &Noise::relative(0.02), 5, &IntegratorConfig::rk4(0.01)).unwrap();
    let base: Arc<dyn ModelStructure> = Arc::new(CstrStructure::default());
    let drain = [-1.0, 0.0, 0.0].map(|value| FluxBinding::Constant { value }).to_vec();
    let hm = HybridModel::new(base, drain).unwrap();
    let eval = evaluate_hybrid(&hm, &data, &[], &IntegratorConfig::rk4(0.1));
    assert_eq!(eval.n_failed(), 2);
    assert!(eval.scores.iter().all(|s| s.error.is_some() && s.fit.is_none()));
    assert_eq!(eval.total_fit(), 0.0);
}
