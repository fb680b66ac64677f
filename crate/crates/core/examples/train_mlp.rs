//! Step 4 building block: both network architectures on a smooth two-input
//! map, with a finite-difference check of backpropagation.

use hybrid_ident::mlp::{gradient_check, train_rows, Batch, Mlp, MlpSpec, TrainConfig};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> hybrid_ident::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<Vec<f64>> = (0..300)
        .map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0)])
        .collect();
    let y: Vec<Vec<f64>> = x.iter().map(|r| vec![0.5 * r[0].sin() + 0.3 * r[1] * r[1]]).collect();
    let cfg = TrainConfig {
        epochs: 2000,
        ..TrainConfig::default()
    };

    for spec in [MlpSpec::tanh_linear(2, 5), MlpSpec::leaky_wide(2, 5)] {
        let (net, report) = train_rows(&x, &y, &spec, &cfg)?;
        let batch = Batch::new(x[..16].to_vec(), y[..16].to_vec());
        let h = if spec.dropout_rate > 0.0 { 1e-4 } else { 1e-6 };
        let fresh = Mlp::init(&spec)?;
        println!(
            "{:?} {:?}: train mse {:.3e}, val mse {:.3e}, f(0.5, -0.5) = {:.4} (true {:.4}), gradient check {:.1e}",
            spec.layer_sizes,
            spec.activations,
            report.train_mse,
            report.val_mse.unwrap_or(f64::NAN),
            net.forward(&[0.5, -0.5])?[0],
            0.5 * 0.5f64.sin() + 0.3 * 0.25,
            gradient_check(&fresh, &batch, None, h)
        );
    }
    Ok(())
}
