//! Small feedforward networks for flux regression: standardization, exact
//! backpropagation, Adam with optional inverted dropout, JSON model files.

use std::cmp::Ordering;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analyze::FluxTable;
use crate::error::{Error, Result};
use crate::nls::solve_spd;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<f64>, Vec<f64>, Vec<f64>)> = const { std::cell::RefCell::new((Vec::new(), Vec::new(), Vec::new())) };
}
const LEAKY_ALPHA: f64 = 0.01;
const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Linear,
    LeakyRelu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_ALPHA * z
                }
            }
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    LEAKY_ALPHA
                }
            }
        }
    }
}

/// Architecture: `layer_sizes = [n_in, h₁, …, n_out]` with one activation per
/// weight layer. Dropout acts on hidden-layer outputs during training only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activations: Vec<Activation>,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl MlpSpec {
    /// Two hidden layers of 4: tanh, then linear; linear output.
    pub fn tanh_linear(n_in: usize, seed: u64) -> Self {
        Self {
            layer_sizes: vec![n_in, 4, 4, 1],
            activations: vec![Activation::Tanh, Activation::Linear, Activation::Linear],
            dropout_rate: 0.0,
            seed,
        }
    }

    /// Two leaky-ReLU hidden layers of 10 with dropout 0.1; linear output.
    pub fn leaky_wide(n_in: usize, seed: u64) -> Self {
        Self {
            layer_sizes: vec![n_in, 10, 10, 1],
            activations: vec![Activation::LeakyRelu, Activation::LeakyRelu, Activation::Linear],
            dropout_rate: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 || self.layer_sizes.contains(&0) {
            return Err(Error::invalid("MLP layer sizes", "need at least two layers, all of size >= 1"));
        }
        if self.activations.len() != self.layer_sizes.len() - 1 {
            return Err(Error::dimension(
                "MLP activations",
                self.layer_sizes.len() - 1,
                self.activations.len(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("dropout rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn n_in(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_out(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Dense layer `a = σ(W·x + b)` with `W` stored as rows (one per output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn n_in(&self) -> usize {
        self.weights[0].len()
    }

    fn n_out(&self) -> usize {
        self.biases.len()
    }
}

/// Per-column z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Weighted mean and population standard deviation, std floored.
    fn fit(rows: &[Vec<f64>], counts: &[f64]) -> Self {
        let n = rows[0].len();
        let total: f64 = counts.iter().sum();
        let mut mean = vec![0.0; n];
        for (r, c) in rows.iter().zip(counts) {
            for j in 0..n {
                mean[j] += c * r[j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= total);
        let mut var = vec![0.0; n];
        for (r, c) in rows.iter().zip(counts) {
            for j in 0..n {
                var[j] += c * (r[j] - mean[j]).powi(2);
            }
        }
        let std = var.iter().map(|v| (v / total).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    pub fn standardize(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..x.len() {
            out[i] = (x[i] - self.mean[i]) / self.std[i];
        }
    }

    pub fn unstandardize(&self, z: &[f64], out: &mut [f64]) {
        for i in 0..z.len() {
            out[i] = z[i] * self.std[i] + self.mean[i];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub schema_version: u32,
    pub spec: MlpSpec,
    pub input_names: Vec<String>,
    pub output_names: Vec<String>,
    pub layers: Vec<Layer>,
    pub input_scaler: Scaler,
    pub output_scaler: Scaler,
}

impl Mlp {
    /// Xavier-uniform weights and zero biases drawn from `spec.seed`, identity scalers.
    pub fn init(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let layers = spec
            .layer_sizes
            .windows(2)
            .zip(&spec.activations)
            .map(|(w, act)| {
                let (n_in, n_out) = (w[0], w[1]);
                let limit = (6.0 / (n_in + n_out) as f64).sqrt();
                Layer {
                    weights: (0..n_out)
                        .map(|_| (0..n_in).map(|_| limit * (2.0 * rng.random::<f64>() - 1.0)).collect())
                        .collect(),
                    biases: vec![0.0; n_out],
                    activation: *act,
                }
            })
            .collect();
        Ok(Self {
            schema_version: MODEL_SCHEMA_VERSION,
            spec: spec.clone(),
            input_names: (0..spec.n_in()).map(|i| format!("x{}", i + 1)).collect(),
            output_names: (0..spec.n_out()).map(|i| format!("y{}", i + 1)).collect(),
            layers,
            input_scaler: Scaler::identity(spec.n_in()),
            output_scaler: Scaler::identity(spec.n_out()),
        })
    }

    /// Builds a network from explicit layers; the spec is derived from them.
    pub fn from_layers(layers: Vec<Layer>, input_scaler: Scaler, output_scaler: Scaler) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("MLP", "needs at least one layer"));
        }
        let mut sizes = vec![layers[0].n_in()];
        for (i, l) in layers.iter().enumerate() {
            if l.weights.iter().any(|r| r.len() != sizes[i]) || l.weights.len() != l.biases.len() {
                return Err(Error::invalid("MLP", format!("layer {i} has inconsistent shapes")));
            }
            sizes.push(l.n_out());
        }
        let spec = MlpSpec {
            layer_sizes: sizes,
            activations: layers.iter().map(|l| l.activation).collect(),
            dropout_rate: 0.0,
            seed: 0,
        };
        spec.validate()?;
        if input_scaler.mean.len() != spec.n_in() || output_scaler.mean.len() != spec.n_out() {
            return Err(Error::invalid("MLP", "scaler sizes do not match the layers"));
        }
        Ok(Self {
            schema_version: MODEL_SCHEMA_VERSION,
            input_names: (0..spec.n_in()).map(|i| format!("x{}", i + 1)).collect(),
            output_names: (0..spec.n_out()).map(|i| format!("y{}", i + 1)).collect(),
            spec,
            layers,
            input_scaler,
            output_scaler,
        })
    }

    pub fn n_in(&self) -> usize {
        self.spec.n_in()
    }

    pub fn n_out(&self) -> usize {
        self.spec.n_out()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.n_out() * (l.n_in() + 1)).sum()
    }

    /// All weights then biases, layer by layer.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            for r in &l.weights {
                out.extend_from_slice(r);
            }
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::dimension("MLP parameters", self.n_params(), theta.len()));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for r in &mut l.weights {
                let n = r.len();
                r.copy_from_slice(&theta[k..k + n]);
                k += n;
            }
            let n = l.biases.len();
            l.biases.copy_from_slice(&theta[k..k + n]);
            k += n;
        }
        Ok(())
    }

    /// Network output in standardized space.
    fn core_forward(&self, xs: &[f64], out: &mut Vec<f64>, tmp: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(xs);
        for l in &self.layers {
            tmp.clear();
            for (row, b) in l.weights.iter().zip(&l.biases) {
                let z = row.iter().zip(out.iter()).map(|(w, a)| w * a).sum::<f64>() + b;
                tmp.push(l.activation.apply(z));
            }
            std::mem::swap(out, tmp);
        }
    }

    /// Inference (dropout off).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_in() {
            return Err(Error::dimension("MLP input", self.n_in(), x.len()));
        }
        let mut y = vec![0.0; self.n_out()];
        self.forward_into(x, &mut y)?;
        Ok(y)
    }

    /// [`Mlp::forward`] into a caller buffer, reusing per-thread scratch space.
    pub fn forward_into(&self, x: &[f64], y: &mut [f64]) -> Result<()> {
        if x.len() != self.n_in() {
            return Err(Error::dimension("MLP input", self.n_in(), x.len()));
        }
        if y.len() != self.n_out() {
            return Err(Error::dimension("MLP output", self.n_out(), y.len()));
        }
        SCRATCH.with(|s| {
            let (xs, a, tmp) = &mut *s.borrow_mut();
            xs.resize(x.len(), 0.0);
            self.input_scaler.standardize(x, xs);
            self.core_forward(xs, a, tmp);
            self.output_scaler.unstandardize(a, y);
        });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Mlp = serde_json::from_str(s).map_err(|e| Error::parse("<mlp>", e.to_string()))?;
        if m.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::parse("<mlp>", format!("unsupported schema version {}", m.schema_version)));
        }
        m.spec.validate()?;
        Mlp::from_layers(m.layers.clone(), m.input_scaler.clone(), m.output_scaler.clone())?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| match e {
            Error::Parse { message, .. } => Error::parse(path, message),
            other => other,
        })
    }
}

/// Row-weighted training batch in standardized space.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub counts: Vec<f64>,
}

impl Batch {
    pub fn new(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> Self {
        let counts = vec![1.0; x.len()];
        Self { x, y, counts }
    }

    fn total(&self) -> f64 {
        self.counts.iter().sum()
    }
}

/// Dropout keep-masks (already divided by the keep probability), indexed by
/// row, hidden layer, unit.
pub type DropoutMasks = Vec<Vec<Vec<f64>>>;

/// Mean squared error over rows and outputs, and its exact gradient with
/// respect to [`Mlp::params`]. Inputs and targets are taken as already
/// standardized; `masks` fixes the dropout pattern.
pub fn loss_and_gradient(net: &Mlp, batch: &Batch, masks: Option<&DropoutMasks>) -> (f64, Vec<f64>) {
    let n_layers = net.layers.len();
    let mut grad = vec![0.0; net.n_params()];
    let offsets: Vec<usize> = net
        .layers
        .iter()
        .scan(0, |k, l| {
            let o = *k;
            *k += l.n_out() * (l.n_in() + 1);
            Some(o)
        })
        .collect();
    let norm = batch.total() * net.n_out() as f64;
    let mut loss = 0.0;
    let mut acts: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
    let mut pre: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
    for (r, ((x, y), c)) in batch.x.iter().zip(&batch.y).zip(&batch.counts).enumerate() {
        acts[0].clear();
        acts[0].extend_from_slice(x);
        for (li, l) in net.layers.iter().enumerate() {
            let (head, tail) = acts.split_at_mut(li + 1);
            let a_in = &head[li];
            let a_out = &mut tail[0];
            pre[li].clear();
            a_out.clear();
            for (o, (row, b)) in l.weights.iter().zip(&l.biases).enumerate() {
                let z = row.iter().zip(a_in).map(|(w, a)| w * a).sum::<f64>() + b;
                pre[li].push(z);
                let mut a = l.activation.apply(z);
                if let Some(m) = masks {
                    if li + 1 < n_layers {
                        a *= m[r][li][o];
                    }
                }
                a_out.push(a);
            }
        }
        // δ = ∂L/∂(layer output), then through the activation
        let mut delta: Vec<f64> = acts[n_layers]
            .iter()
            .zip(y)
            .map(|(a, t)| {
                loss += c * (a - t) * (a - t);
                2.0 * c * (a - t) / norm
            })
            .collect();
        for li in (0..n_layers).rev() {
            let l = &net.layers[li];
            let n_in = l.n_in();
            for o in 0..l.n_out() {
                let mut a = acts[li + 1][o];
                let mut scale = 1.0;
                if let Some(m) = masks {
                    if li + 1 < n_layers {
                        scale = m[r][li][o];
                        if scale == 0.0 {
                            delta[o] = 0.0;
                            continue;
                        }
                        a /= scale;
                    }
                }
                delta[o] *= scale * l.activation.derivative(pre[li][o], a);
            }
            let off = offsets[li];
            for o in 0..l.n_out() {
                let d = delta[o];
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(&acts[li]) {
                    *g += d * a;
                }
                grad[off + l.n_out() * n_in + o] += d;
            }
            if li > 0 {
                let mut prev = vec![0.0; n_in];
                for (o, row) in l.weights.iter().enumerate() {
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * delta[o];
                    }
                }
                delta = prev;
            }
        }
    }
    (loss / norm, grad)
}

/// Gradient of the MSE of `net` on raw `(x, y)` rows, in the network's
/// standardized output space.
pub fn mlp_gradient(net: &Mlp, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<(f64, Vec<f64>)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::invalid("gradient batch", "needs matching, non-empty x and y"));
    }
    let batch = standardized_batch(net, x, y, vec![1.0; x.len()])?;
    Ok(loss_and_gradient(net, &batch, None))
}

fn standardized_batch(net: &Mlp, x: &[Vec<f64>], y: &[Vec<f64>], counts: Vec<f64>) -> Result<Batch> {
    let mut bx = Vec::with_capacity(x.len());
    let mut by = Vec::with_capacity(y.len());
    for (xi, yi) in x.iter().zip(y) {
        if xi.len() != net.n_in() || yi.len() != net.n_out() {
            return Err(Error::dimension("training row", net.n_in() + net.n_out(), xi.len() + yi.len()));
        }
        let mut xs = vec![0.0; xi.len()];
        net.input_scaler.standardize(xi, &mut xs);
        let mut ys = vec![0.0; yi.len()];
        for o in 0..yi.len() {
            ys[o] = (yi[o] - net.output_scaler.mean[o]) / net.output_scaler.std[o];
        }
        bx.push(xs);
        by.push(ys);
    }
    Ok(Batch { x: bx, y: by, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch_size: Option<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub validation_fraction: f64,
    /// Solve the final linear layer by least squares before Adam starts.
    pub readout_init: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            batch_size: None,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            validation_fraction: 0.2,
            readout_init: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation fraction", "must lie in [0, 1)"));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::invalid("Adam settings", "need lr > 0, betas in [0, 1), eps > 0"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("batch size", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub flux: String,
    pub inputs: Vec<String>,
    pub n_train: usize,
    pub n_val: usize,
    /// Standardized-space MSE after each epoch, dropout off.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// MSE in the flux's own units with the final weights.
    pub train_mse: f64,
    pub val_mse: Option<f64>,
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Canonical training set: rows sorted, duplicates merged into counts. The
/// full-batch gradient is then independent of row order and multiplicity.
fn canonical_rows(x: &[Vec<f64>], y: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
    let mut rows: Vec<Vec<f64>> = x.iter().zip(y).map(|(a, b)| a.iter().chain(b).copied().collect()).collect();
    rows.sort_by(|a, b| lexicographic(a, b));
    let n_in = x[0].len();
    let (mut ux, mut uy, mut counts): (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) = (Vec::new(), Vec::new(), Vec::new());
    let mut prev: Option<&Vec<f64>> = None;
    for r in &rows {
        if prev.is_some_and(|p| lexicographic(p, r).is_eq()) {
            *counts.last_mut().unwrap() += 1.0;
        } else {
            ux.push(r[..n_in].to_vec());
            uy.push(r[n_in..].to_vec());
            counts.push(1.0);
        }
        prev = Some(r);
    }
    (ux, uy, counts)
}

fn mse(net: &Mlp, x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<f64> {
    let mut s = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let p = net.forward(xi)?;
        s += p.iter().zip(yi).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(s / (x.len() * y[0].len()) as f64)
}

/// Least-squares fit of the last layer on the hidden features of the initial
/// network, when that layer is linear.
fn readout_init(net: &mut Mlp, batch: &Batch) -> Result<()> {
    let last = net.layers.len() - 1;
    if net.layers[last].activation != Activation::Linear {
        return Ok(());
    }
    let n_h = net.layers[last].n_in();
    let mut feats = Vec::with_capacity(batch.x.len());
    let head = Mlp {
        layers: net.layers[..last].to_vec(),
        ..net.clone()
    };
    let (mut a, mut tmp) = (Vec::new(), Vec::new());
    for x in &batch.x {
        head.core_forward(x, &mut a, &mut tmp);
        feats.push(a.clone());
    }
    let m = n_h + 1;
    let mut ata = DMatrix::zeros(m, m);
    let mut aty = DMatrix::zeros(m, net.n_out());
    for ((f, y), c) in feats.iter().zip(&batch.y).zip(&batch.counts) {
        let row: Vec<f64> = f.iter().copied().chain(std::iter::once(1.0)).collect();
        for i in 0..m {
            for j in 0..m {
                ata[(i, j)] += c * row[i] * row[j];
            }
            for o in 0..y.len() {
                aty[(i, o)] += c * row[i] * y[o];
            }
        }
    }
    let total = batch.total();
    ata /= total;
    aty /= total;
    let ridge = 1e-10 * (0..m).map(|i| ata[(i, i)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for i in 0..m {
        ata[(i, i)] += ridge;
    }
    let layer = &mut net.layers[last];
    for o in 0..layer.n_out() {
        let Ok(sol) = solve_spd(&ata, &DVector::from_fn(m, |i, _| aty[(i, o)])) else {
            return Ok(());
        };
        layer.weights[o].copy_from_slice(&sol.as_slice()[..n_h]);
        layer.biases[o] = sol[n_h];
    }
    Ok(())
}

fn draw_masks(net: &Mlp, n_rows: usize, rate: f64, rng: &mut ChaCha8Rng) -> DropoutMasks {
    let keep = 1.0 - rate;
    let hidden = &net.spec.layer_sizes[1..net.spec.layer_sizes.len() - 1];
    (0..n_rows)
        .map(|_| {
            hidden
                .iter()
                .map(|&n| {
                    (0..n)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect()
                })
                .collect()
        })
        .collect()
}

/// Trains on raw rows; the last `validation_fraction` of rows (in the given
/// order) are held out. Scalers come from the training split only.
pub fn train_rows(x: &[Vec<f64>], y: &[Vec<f64>], spec: &MlpSpec, cfg: &TrainConfig) -> Result<(Mlp, TrainingReport)> {
    spec.validate()?;
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(Error::dimension("training targets", x.len(), y.len()));
    }
    let n = x.len();
    let n_val = (cfg.validation_fraction * n as f64).round() as usize;
    let n_train = n - n_val;
    if n_train == 0 {
        return Err(Error::InsufficientData("no training rows".into()));
    }
    let (tx, vx) = x.split_at(n_train);
    let (ty, vy) = y.split_at(n_train);
    let (ux, uy, counts) = canonical_rows(tx, ty);

    let mut net = Mlp::init(spec)?;
    net.input_scaler = Scaler::fit(&ux, &counts);
    net.output_scaler = Scaler::fit(&uy, &counts);
    let batch = standardized_batch(&net, &ux, &uy, counts)?;
    let val_batch = if n_val > 0 {
        Some(standardized_batch(&net, vx, vy, vec![1.0; n_val])?)
    } else {
        None
    };
    if cfg.readout_init {
        readout_init(&mut net, &batch)?;
    }

    let mut theta = net.params();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ spec.seed.rotate_left(32));
    let (mut b1t, mut b2t) = (1.0, 1.0);
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    let mut val_loss = Vec::new();
    let n_unique = batch.x.len();
    let mut order: Vec<usize> = (0..n_unique).collect();

    for _ in 0..cfg.epochs {
        let chunks: Vec<Vec<usize>> = match cfg.batch_size {
            Some(bs) if bs < n_unique => {
                for i in (1..n_unique).rev() {
                    let j = rng.random_range(0..=i);
                    order.swap(i, j);
                }
                order.chunks(bs).map(<[usize]>::to_vec).collect()
            }
            _ => vec![order.clone()],
        };
        for idx in &chunks {
            let sub;
            let b = if idx.len() == n_unique && cfg.batch_size.is_none() {
                &batch
            } else {
                sub = Batch {
                    x: idx.iter().map(|&i| batch.x[i].clone()).collect(),
                    y: idx.iter().map(|&i| batch.y[i].clone()).collect(),
                    counts: idx.iter().map(|&i| batch.counts[i]).collect(),
                };
                &sub
            };
            let masks = (spec.dropout_rate > 0.0).then(|| draw_masks(&net, b.x.len(), spec.dropout_rate, &mut rng));
            let (_, g) = loss_and_gradient(&net, b, masks.as_ref());
            b1t *= cfg.beta1;
            b2t *= cfg.beta2;
            for i in 0..theta.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / (1.0 - b1t);
                let vh = v[i] / (1.0 - b2t);
                theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
            }
            net.set_params(&theta)?;
        }
        train_loss.push(loss_and_gradient(&net, &batch, None).0);
        if let Some(vb) = &val_batch {
            val_loss.push(loss_and_gradient(&net, vb, None).0);
        }
    }

    let report = TrainingReport {
        flux: String::new(),
        inputs: Vec::new(),
        n_train,
        n_val,
        train_mse: mse(&net, tx, ty)?,
        val_mse: if n_val > 0 { Some(mse(&net, vx, vy)?) } else { None },
        train_loss,
        val_loss,
    };
    Ok((net, report))
}

/// Trains a single-output network for `flux` on the named table columns.
pub fn train_mlp(
    table: &FluxTable,
    flux: &str,
    inputs: &[String],
    spec: &MlpSpec,
    cfg: &TrainConfig,
) -> Result<(Mlp, TrainingReport)> {
    if inputs.is_empty() {
        return Err(Error::Config(format!(
            "no inputs selected for {flux}; bind it to a constant instead"
        )));
    }
    if table.n_rows() < 10 {
        return Err(Error::InsufficientData(format!("{} table rows, need at least 10", table.n_rows())));
    }
    if spec.n_in() != inputs.len() || spec.n_out() != 1 {
        return Err(Error::dimension("MLP spec for flux", inputs.len(), spec.n_in()));
    }
    let fi = table
        .index_of(flux)
        .ok_or_else(|| Error::Config(format!("unknown flux column {flux}")))?;
    let ii = inputs
        .iter()
        .map(|n| table.index_of(n).ok_or_else(|| Error::Config(format!("unknown input column {n}"))))
        .collect::<Result<Vec<_>>>()?;
    let x: Vec<Vec<f64>> = table.rows.iter().map(|r| ii.iter().map(|&i| r[i]).collect()).collect();
    let y: Vec<Vec<f64>> = table.rows.iter().map(|r| vec![r[fi]]).collect();
    let (mut net, mut report) = train_rows(&x, &y, spec, cfg)?;
    net.input_names = inputs.to_vec();
    net.output_names = vec![flux.to_string()];
    report.flux = flux.to_string();
    report.inputs = inputs.to_vec();
    Ok((net, report))
}

/// `L(θ + h·e_i) − L(θ − h·e_i)` with the difference carried through the
/// layers, so it keeps full relative precision however small it is. The flag
/// is set when the two probes fall on different sides of a leaky-ReLU kink.
fn loss_difference(net: &Mlp, batch: &Batch, masks: Option<&DropoutMasks>, i: usize, h: f64) -> (f64, bool) {
    let n_layers = net.layers.len();
    let size = |l: &Layer| l.n_out() * (l.n_in() + 1);
    let (mut li0, mut k) = (0, i);
    while k >= size(&net.layers[li0]) {
        k -= size(&net.layers[li0]);
        li0 += 1;
    }
    let n_in0 = net.layers[li0].n_in();
    let n_w = net.layers[li0].n_out() * n_in0;
    let (o0, j0) = if k < n_w { (k / n_in0, Some(k % n_in0)) } else { (k - n_w, None) };
    let keep = |r: usize, li: usize, o: usize| match masks {
        Some(m) if li + 1 < n_layers => m[r][li][o],
        _ => 1.0,
    };
    let dot = |row: &[f64], a: &[f64]| row.iter().zip(a).map(|(w, v)| w * v).sum::<f64>();
    let mut crossed = false;
    let mut total = 0.0;
    for (r, ((x, y), c)) in batch.x.iter().zip(&batch.y).zip(&batch.counts).enumerate() {
        let mut a = x.clone();
        for (li, l) in net.layers[..li0].iter().enumerate() {
            a = l
                .weights
                .iter()
                .zip(&l.biases)
                .enumerate()
                .map(|(o, (row, b))| l.activation.apply(dot(row, &a) + b) * keep(r, li, o))
                .collect();
        }
        let (mut ap, mut am, mut da) = (a.clone(), a, Vec::new());
        for (li, l) in net.layers.iter().enumerate().skip(li0) {
            let (mut np, mut nm, mut nd) = (Vec::new(), Vec::new(), Vec::new());
            for (o, (row, b)) in l.weights.iter().zip(&l.biases).enumerate() {
                let (zp, zm, dz) = if li == li0 {
                    let z = dot(row, &ap) + b;
                    let step = if o == o0 { j0.map_or(h, |j| h * ap[j]) } else { 0.0 };
                    (z + step, z - step, 2.0 * step)
                } else {
                    (dot(row, &ap) + b, dot(row, &am) + b, dot(row, &da))
                };
                let d = match l.activation {
                    _ if dz == 0.0 => 0.0,
                    Activation::Linear => dz,
                    Activation::Tanh => dz.sinh() / (zp.cosh() * zm.cosh()),
                    Activation::LeakyRelu if (zp > 0.0) == (zm > 0.0) => dz * l.activation.derivative(zp, 0.0),
                    Activation::LeakyRelu => {
                        crossed = true;
                        l.activation.apply(zp) - l.activation.apply(zm)
                    }
                };
                let m = keep(r, li, o);
                np.push(l.activation.apply(zp) * m);
                nm.push(l.activation.apply(zm) * m);
                nd.push(d * m);
            }
            (ap, am, da) = (np, nm, nd);
        }
        for (((p, m), d), t) in ap.iter().zip(&am).zip(&da).zip(y) {
            total += c * d * (p + m - 2.0 * t);
        }
    }
    (total / (batch.total() * net.n_out() as f64), crossed)
}

/// Largest relative deviation between the backpropagated gradient and central
/// differences with step `h`, the differences evaluated without cancellation.
/// A probe pair straddling a leaky-ReLU kink is retried with a smaller step;
/// parameters that stay on a kink are skipped.
pub fn gradient_check(net: &Mlp, batch: &Batch, masks: Option<&DropoutMasks>, h: f64) -> f64 {
    let (_, g) = loss_and_gradient(net, batch, masks);
    let mut worst: f64 = 0.0;
    for (i, gi) in g.iter().enumerate() {
        let mut step = h;
        let mut fd = None;
        for _ in 0..4 {
            let (diff, crossed) = loss_difference(net, batch, masks, i, step);
            if !crossed {
                fd = Some(diff / (2.0 * step));
                break;
            }
            step /= 10.0;
        }
        let Some(fd) = fd else { continue };
        let denom = fd.abs().max(gi.abs()).max(1e-6);
        worst = worst.max((fd - gi).abs() / denom);
    }
    worst
}
