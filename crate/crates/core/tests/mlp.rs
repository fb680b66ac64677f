use hybrid_ident::analyze::{Column, ColumnKind, FluxTable, RowSource};
use hybrid_ident::mlp::{gradient_check, train_mlp, train_rows, Batch, DropoutMasks, Mlp, MlpSpec, TrainConfig};
use proptest::prelude::*;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn target(x: &[f64]) -> f64 {
    0.5 * x[0].sin() + 0.3 * x[1] * x[1] - 0.2 * x[0] * x[1]
}

fn rows(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)])
        .collect();
    let y = x.iter().map(|r| vec![target(r)]).collect();
    (x, y)
}

fn random_batch(n_in: usize, rows: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = (0..rows).map(|_| (0..n_in).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let y = (0..rows).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
    Batch::new(x, y)
}

fn cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    }
}

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn training_loss_falls_over_epoch_windows() {
    let (x, y) = rows(200, 1);
    for spec in [MlpSpec::tanh_linear(2, 3), MlpSpec::leaky_wide(2, 3)] {
        let (_, report) = train_rows(&x, &y, &spec, &TrainConfig::default()).unwrap();
        let l = &report.train_loss;
        let windows: Vec<f64> = l.chunks(100).map(window_mean).collect();
        let slack = if spec.dropout_rate > 0.0 { 1.10 } else { 1.0 };
        let mut best = windows[0];
        for w in &windows[1..] {
            assert!(*w <= best * slack, "{windows:?}");
            best = best.min(*w);
        }
        assert!(windows.last().unwrap() < &windows[0]);
    }
}

#[test]
fn both_architectures_fit_a_smooth_map() {
    let (x, y) = rows(300, 2);
    for spec in [MlpSpec::tanh_linear(2, 5), MlpSpec::leaky_wide(2, 5)] {
        let (net, report) = train_rows(&x, &y, &spec, &cfg(3000)).unwrap();
        let var = {
            let m = y.iter().map(|r| r[0]).sum::<f64>() / y.len() as f64;
            y.iter().map(|r| (r[0] - m).powi(2)).sum::<f64>() / y.len() as f64
        };
        assert!(report.train_mse < 0.1 * var, "{:?}: {} vs {var}", spec.activations, report.train_mse);
        assert!(report.val_mse.unwrap() < 0.2 * var);
        assert_eq!(net.n_in(), 2);
    }
}

fn masks(rows: usize, hidden: &[usize], rate: f64, seed: u64) -> DropoutMasks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    (0..rows)
        .map(|_| {
            hidden
                .iter()
                .map(|&n| (0..n).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect())
                .collect()
        })
        .collect()
}

#[test]
fn gradient_checks_pass_on_both_architectures() {
    let batch = random_batch(2, 16, 4);
    let smooth = Mlp::init(&MlpSpec::tanh_linear(2, 11)).unwrap();
    assert!(gradient_check(&smooth, &batch, None, 1e-6) <= 1e-5);
    let wide = Mlp::init(&MlpSpec::leaky_wide(3, 11)).unwrap();
    let batch = random_batch(3, 16, 4);
    assert!(gradient_check(&wide, &batch, None, 1e-4) <= 1e-5);
    let m = masks(16, &[10, 10], 0.1, 2);
    assert!(gradient_check(&wide, &batch, Some(&m), 1e-4) <= 1e-5);
}

#[test]
fn model_files_round_trip() {
    let (x, y) = rows(100, 6);
    let (net, _) = train_rows(&x, &y, &MlpSpec::tanh_linear(2, 1), &cfg(200)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.json");
    net.save(&path).unwrap();
    let back = Mlp::load(&path).unwrap();
    assert_eq!(back, net);
    assert_eq!(back.forward(&[0.3, -0.2]).unwrap(), net.forward(&[0.3, -0.2]).unwrap());
    assert_eq!(back.to_json().unwrap(), std::fs::read_to_string(&path).unwrap().trim_end());
}

fn table(n: usize) -> FluxTable {
    let (x, y) = rows(n, 8);
    let columns = vec![
        Column { name: "a".into(), unit: "-".into(), kind: ColumnKind::State },
        Column { name: "b".into(), unit: "-".into(), kind: ColumnKind::Input },
        Column { name: "p".into(), unit: "-".into(), kind: ColumnKind::Flux },
    ];
    let data = x.iter().zip(&y).map(|(a, b)| vec![a[0], a[1], b[0]]).collect();
    let prov = (0..n)
        .map(|i| RowSource { dataset: "d".into(), interval: i, t: i as f64 })
        .collect();
    FluxTable::new(columns, data, prov).unwrap()
}

#[test]
fn table_training_names_the_network() {
    let inputs = vec!["a".to_string(), "b".to_string()];
    let (net, report) = train_mlp(&table(80), "p", &inputs, &MlpSpec::tanh_linear(2, 0), &cfg(100)).unwrap();
    assert_eq!(net.input_names, inputs);
    assert_eq!(net.output_names, vec!["p".to_string()]);
    assert_eq!(report.flux, "p");
    assert_eq!(report.n_train + report.n_val, 80);
}

#[test]
fn table_training_rejects_bad_requests() {
    let spec = MlpSpec::tanh_linear(1, 0);
    let t = table(80);
    assert!(train_mlp(&t, "p", &[], &spec, &cfg(10)).is_err());
    assert!(train_mlp(&t, "p", &["zz".into()], &spec, &cfg(10)).is_err());
    assert!(train_mlp(&t, "q", &["a".into()], &spec, &cfg(10)).is_err());
    assert!(train_mlp(&table(5), "p", &["a".into()], &spec, &cfg(10)).is_err());
    assert!(train_mlp(&t, "p", &["a".into(), "b".into()], &spec, &cfg(10)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn backprop_matches_finite_differences(seed in any::<u64>(), n_in in 1usize..5, wide in any::<bool>()) {
        let (spec, h) = if wide { (MlpSpec::leaky_wide(n_in, seed), 1e-4) } else { (MlpSpec::tanh_linear(n_in, seed), 1e-6) };
        let net = Mlp::init(&spec).unwrap();
        let batch = random_batch(n_in, 8, seed ^ 0x5a5a);
        let m = wide.then(|| masks(8, &[10, 10], 0.1, seed));
        prop_assert!(gradient_check(&net, &batch, m.as_ref(), h) <= 1e-5);
    }
}
