use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hybrid_ident::cli::files::{dataset_from_csv, dataset_to_csv, CsvDoc, Stamp};
use hybrid_ident::cli::{context, main_with_args, run, Command, Opts};
use hybrid_ident::hybrid::{FluxBinding, HybridModel};
use hybrid_ident::model::ModelStructure;
use hybrid_ident::sim::{generate_pseudo_data, CstrParams, CstrScenarioDesign, CstrStructure, CstrTruth, IntegratorConfig, Noise};

const SMALL: &str = r#"
case = "cstr"
seed = 11

[data]
scenarios = 2

[data.cstr_design]
span = 240.0

[training.train]
epochs = 200

[simulate]
heldout = 1
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn opts(config: &Path, out: &Path) -> Opts {
    Opts {
        config: Some(config.to_path_buf()),
        out: Some(out.to_path_buf()),
        ..Opts::default()
    }
}

fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn exit_code(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("hybrid-ident").chain(args.iter().copied()))
}

#[test]
fn dataset_csv_round_trips_byte_identically() {
    let params = CstrParams::default();
    let design = CstrScenarioDesign {
        span: 120.0,
        ..CstrScenarioDesign::default()
    };
    let truth = CstrTruth::new(params.clone());
    let data = generate_pseudo_data(&truth, &design.scenarios(&params, 1, 2).unwrap(), 1.0, &Noise::relative(0.02), 2, &IntegratorConfig::rk4(0.05)).unwrap();
    let model = CstrStructure::default();
    let names = model.names();
    let stamp = Stamp { config_hash: "ab".repeat(32), seed: 2 };
    let (d, k) = dataset_to_csv(&data[0], &names.outputs, &names.inputs, &stamp).unwrap();
    let (dt, kt) = (d.render().unwrap(), k.render().unwrap());
    let p = Path::new("mem.csv");
    let back = dataset_from_csv(&CsvDoc::parse(&dt, p).unwrap(), p, &CsvDoc::parse(&kt, p).unwrap(), p).unwrap();
    assert_eq!(back, data[0]);
    let (d2, k2) = dataset_to_csv(&back, &names.outputs, &names.inputs, &stamp).unwrap();
    assert_eq!(d2.render().unwrap(), dt);
    assert_eq!(k2.render().unwrap(), kt);
}

#[test]
fn pipeline_is_deterministic_and_stages_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let mut lines = Vec::new();
    run(Command::Pipeline, &opts(&cfg, &a), &mut |l| lines.push(l.to_string())).unwrap();
    assert_eq!(lines.len(), Command::STAGES.len());
    run(Command::Pipeline, &opts(&cfg, &b), &mut |_| {}).unwrap();
    let first = snapshot(&a);
    assert_eq!(first, snapshot(&b));

    for stage in Command::STAGES {
        run(stage, &opts(&cfg, &a), &mut |_| {}).unwrap();
        assert_eq!(snapshot(&a), first, "{stage:?}");
    }

    let stored = Opts {
        out: Some(a.clone()),
        ..Opts::default()
    };
    run(Command::Correlate, &stored, &mut |_| {}).unwrap();
    assert_eq!(snapshot(&a), first);
}

#[test]
fn every_artifact_carries_the_config_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let o = opts(&cfg, &out);
    run(Command::Pipeline, &o, &mut |_| {}).unwrap();
    let hash = context(&o).unwrap().stamp.config_hash;
    assert_eq!(hash.len(), 64);
    let files = snapshot(&out);
    assert!(files.len() > 10);
    for (path, bytes) in files {
        let text = String::from_utf8(bytes).unwrap();
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                let v: serde_json::Value = serde_json::from_str(&text).unwrap();
                assert_eq!(v["config_hash"], hash.as_str(), "{path:?}");
                assert_eq!(v["seed"], 11, "{path:?}");
            }
            Some("csv") => {
                let doc = CsvDoc::parse(&text, &path).unwrap();
                assert_eq!(doc.get("config_hash"), Some(hash.as_str()), "{path:?}");
                assert_eq!(doc.get("seed"), Some("11"), "{path:?}");
            }
            Some("toml") => assert_eq!(path, Path::new("config.toml")),
            other => panic!("unexpected artifact {path:?} ({other:?})"),
        }
    }
}

#[test]
fn seed_and_overrides_change_the_hash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("run");
    let base = context(&opts(&cfg, &out)).unwrap().stamp;
    let reseeded = context(&Opts { seed: Some(12), ..opts(&cfg, &out) }).unwrap().stamp;
    let tau = context(&Opts { tau: Some(0.4), ..opts(&cfg, &out) }).unwrap().stamp;
    let moved = context(&opts(&cfg, &dir.path().join("elsewhere"))).unwrap().stamp;
    assert_eq!(reseeded.seed, 12);
    assert_ne!(reseeded.config_hash, base.config_hash);
    assert_ne!(tau.config_hash, base.config_hash);
    assert_eq!(moved, base);
}

#[test]
fn missing_upstream_artifacts_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    let out = out.to_str().unwrap();
    for stage in ["estimate", "table", "correlate", "train", "assemble", "simulate", "evaluate"] {
        assert_eq!(exit_code(&[stage, "--out", out]), 3, "{stage}");
    }
}

#[test]
fn bad_configuration_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();
    let unknown = write_config(dir.path(), "case = \"cstr\"\nbogus = 1\n");
    assert_eq!(exit_code(&["gen-data", "--config", unknown.to_str().unwrap(), "--out", out]), 2);
    assert_eq!(exit_code(&["gen-data", "--case", "reactor", "--out", out]), 2);
    assert_eq!(exit_code(&["gen-data", "--tau", "1.5", "--out", out]), 2);
    assert_eq!(exit_code(&["gen-data", "--config", "/nonexistent/run.toml", "--out", out]), 2);
    assert_eq!(exit_code(&["no-such-stage"]), 2);
    let mpc_on_reactor = write_config(dir.path(), "case = \"cstr\"\n[mpc]\nduration = 10.0\n");
    assert_eq!(exit_code(&["gen-data", "--config", mpc_on_reactor.to_str().unwrap(), "--out", out]), 2);
}

#[test]
fn diverging_truth_model_exits_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let drain = [-1.0, 0.0, 0.0].map(|value| FluxBinding::Constant { value }).to_vec();
    let hm = HybridModel::new(std::sync::Arc::new(CstrStructure::default()), drain).unwrap();
    let manifest = dir.path().join("truth.json");
    hm.manifest().save(&manifest).unwrap();
    let text = format!(
        "case = \"user-model-manifest\"\ntruth_manifest = {:?}\n[data]\nscenarios = 1\n[data.cstr_design]\nspan = 120.0\n",
        manifest.to_str().unwrap()
    );
    let cfg = write_config(dir.path(), &text);
    let out = dir.path().join("o");
    assert_eq!(exit_code(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 4);
}

#[test]
fn user_manifest_truth_runs_the_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    run(Command::Pipeline, &opts(&cfg, &a), &mut |_| {}).unwrap();
    let text = SMALL.replace(
        "case = \"cstr\"",
        &format!("case = \"user-model-manifest\"\ntruth_manifest = {:?}", a.join("hybrid/manifest.json").to_str().unwrap()),
    );
    let cfg = write_config(dir.path(), &text);
    let mut lines = Vec::new();
    run(Command::Pipeline, &opts(&cfg, &dir.path().join("b")), &mut |l| lines.push(l.to_string())).unwrap();
    assert!(lines[0].starts_with("gen-data: 2 datasets"), "{lines:?}");
    assert!(lines.last().unwrap().contains("0 failed"), "{lines:?}");
}
