//! Multilayer perceptron: sigmoid hidden layers, a softmax output pair,
//! cross-entropy loss, and mini-batch gradient descent with an automatic
//! learning-rate halving loop that keeps the training loss non-increasing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_binary_data, softmax, TrainConfig, TrainError};
use crate::features::FEATURE_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Sigmoid,
    Softmax,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Row-major weights: `weights[out][in]`.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut z: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(row, b)| b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>())
            .collect();
        match self.activation {
            Activation::Sigmoid => {
                for v in &mut z {
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
            }
            Activation::Softmax => z = softmax(&z),
            Activation::Identity => {}
        }
        z
    }

    /// d(activation)/d(pre-activation) expressed through the activation
    /// value; only defined for elementwise activations.
    fn derivative_from_output(&self, a: f64) -> f64 {
        match self.activation {
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
            Activation::Softmax => {
                unreachable!("softmax appears only as the final layer, handled via cross-entropy")
            }
        }
    }
}

/// Gradient of the mean loss with respect to one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    /// Mean training cross-entropy before training and after each epoch.
    pub loss_history: Vec<f64>,
    /// The learning rate that passed the stability check.
    pub learning_rate_used: f64,
}

impl MlpModel {
    /// Fresh network with uniform Xavier weights and zero biases; hidden
    /// layers are sigmoid, the final layer softmax. `dims` runs from the
    /// input width (always [`FEATURE_COUNT`]) to the output width.
    pub fn random_init(dims: &[usize], seed: u64) -> MlpModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::random_init_with(dims, &mut rng)
    }

    fn random_init_with(dims: &[usize], rng: &mut ChaCha8Rng) -> MlpModel {
        assert!(dims.len() >= 2, "need at least input and output widths");
        assert_eq!(dims[0], FEATURE_COUNT, "input width is the feature count");
        assert!(dims.iter().all(|&d| d > 0), "layer widths must be positive");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, pair)| {
                let (fan_in, fan_out) = (pair[0], pair[1]);
                let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    weights: (0..fan_out)
                        .map(|_| (0..fan_in).map(|_| rng.gen_range(-scale..scale)).collect())
                        .collect(),
                    biases: vec![0.0; fan_out],
                    activation: if l + 2 == dims.len() {
                        Activation::Softmax
                    } else {
                        Activation::Sigmoid
                    },
                }
            })
            .collect();
        MlpModel {
            layers,
            loss_history: Vec::new(),
            learning_rate_used: 0.0,
        }
    }

    /// Class probabilities `[p(fast-flux), p(legitimate)]`.
    pub fn forward(&self, x: &[f64; FEATURE_COUNT]) -> Vec<f64> {
        let mut a = x.to_vec();
        for layer in &self.layers {
            a = layer.forward(&a);
        }
        a
    }

    /// Signed score: p(legitimate) - p(fast-flux); zero means a tie, which
    /// the prediction layer resolves toward fast-flux.
    pub fn decision(&self, x: &[f64; FEATURE_COUNT]) -> f64 {
        let p = self.forward(x);
        p[1] - p[0]
    }

    /// Activations of every layer, input included.
    fn trace(&self, x: &[f64; FEATURE_COUNT]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let next = layer.forward(acts.last().expect("non-empty"));
            acts.push(next);
        }
        acts
    }
}

/// One-hot target index: fast-flux (-1) is output 0, legitimate (+1) is 1.
fn target_index(label: i8) -> usize {
    usize::from(label == 1)
}

/// Mean cross-entropy of the softmax outputs against the labels.
pub fn mlp_loss(model: &MlpModel, rows: &[[f64; FEATURE_COUNT]], labels: &[i8]) -> f64 {
    assert_eq!(rows.len(), labels.len());
    let total: f64 = rows
        .iter()
        .zip(labels)
        .map(|(x, &y)| {
            let p = model.forward(x)[target_index(y)];
            // Floor the probability without masking NaN: a NaN must reach
            // the divergence check, not vanish inside f64::max.
            let clipped = if p < 1e-300 { 1e-300 } else { p };
            -clipped.ln()
        })
        .sum();
    total / rows.len() as f64
}

/// Analytic gradient of [`mlp_loss`] via backpropagation. The final layer
/// must be softmax; its cross-entropy delta is `p - t`.
pub fn loss_gradients(
    model: &MlpModel,
    rows: &[[f64; FEATURE_COUNT]],
    labels: &[i8],
) -> Vec<LayerGrads> {
    assert_eq!(rows.len(), labels.len());
    assert!(!rows.is_empty());
    assert_eq!(
        model.layers.last().map(|l| l.activation),
        Some(Activation::Softmax),
        "loss gradients are defined for softmax outputs"
    );
    let mut grads: Vec<LayerGrads> = model
        .layers
        .iter()
        .map(|layer| LayerGrads {
            weights: layer
                .weights
                .iter()
                .map(|row| vec![0.0; row.len()])
                .collect(),
            biases: vec![0.0; layer.biases.len()],
        })
        .collect();

    for (x, &y) in rows.iter().zip(labels) {
        let acts = model.trace(x);
        let output = acts.last().expect("trace includes output");
        let mut delta: Vec<f64> = output.clone();
        delta[target_index(y)] -= 1.0;

        for l in (0..model.layers.len()).rev() {
            let input = &acts[l];
            for (o, d) in delta.iter().enumerate() {
                grads[l].biases[o] += d;
                for (i, a) in input.iter().enumerate() {
                    grads[l].weights[o][i] += d * a;
                }
            }
            if l > 0 {
                let below = &model.layers[l - 1];
                let propagated: Vec<f64> = (0..input.len())
                    .map(|i| {
                        let upstream: f64 = model.layers[l]
                            .weights
                            .iter()
                            .zip(&delta)
                            .map(|(row, d)| row[i] * d)
                            .sum();
                        upstream * below.derivative_from_output(input[i])
                    })
                    .collect();
                delta = propagated;
            }
        }
    }

    let scale = 1.0 / rows.len() as f64;
    for g in &mut grads {
        for row in &mut g.weights {
            for v in row {
                *v *= scale;
            }
        }
        for v in &mut g.biases {
            *v *= scale;
        }
    }
    grads
}

fn apply_grads(model: &mut MlpModel, grads: &[LayerGrads], lr: f64) {
    for (layer, g) in model.layers.iter_mut().zip(grads) {
        for (wrow, grow) in layer.weights.iter_mut().zip(&g.weights) {
            for (w, d) in wrow.iter_mut().zip(grow) {
                *w -= lr * d;
            }
        }
        for (b, d) in layer.biases.iter_mut().zip(&g.biases) {
            *b -= lr * d;
        }
    }
}

enum Unstable {
    NonMonotone,
    Diverged,
}

/// An epoch-level loss increase beyond this slack counts as instability.
fn rose(current: f64, previous: f64) -> bool {
    current > previous + 1e-9 + 1e-9 * previous.abs()
}

fn train_once(
    rows: &[[f64; FEATURE_COUNT]],
    labels: &[i8],
    cfg: &TrainConfig,
    lr: f64,
    enforce_monotone: bool,
) -> Result<MlpModel, Unstable> {
    let mut dims = Vec::with_capacity(cfg.hidden_sizes.len() + 2);
    dims.push(FEATURE_COUNT);
    dims.extend_from_slice(&cfg.hidden_sizes);
    dims.push(2);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::random_init_with(&dims, &mut rng);

    let mut losses = vec![mlp_loss(&model, rows, labels)];
    let mut indices: Vec<usize> = (0..rows.len()).collect();
    let batch = cfg.batch_size.max(1);
    for _ in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(batch) {
            let batch_rows: Vec<[f64; FEATURE_COUNT]> = chunk.iter().map(|&i| rows[i]).collect();
            let batch_labels: Vec<i8> = chunk.iter().map(|&i| labels[i]).collect();
            let grads = loss_gradients(&model, &batch_rows, &batch_labels);
            apply_grads(&mut model, &grads, lr);
        }
        let loss = mlp_loss(&model, rows, labels);
        if !loss.is_finite() {
            return Err(Unstable::Diverged);
        }
        if enforce_monotone && rose(loss, *losses.last().expect("seeded")) {
            return Err(Unstable::NonMonotone);
        }
        losses.push(loss);
    }
    model.loss_history = losses;
    model.learning_rate_used = lr;
    Ok(model)
}

const MAX_HALVINGS: usize = 14;

/// Trains the MLP. The learning rate starts at `cfg.learning_rate` and is
/// halved (with a fresh identically-seeded start) whenever the epoch loss
/// rises or turns non-finite; a rate that survives every epoch yields a
/// non-increasing loss history. If no rate passes within the halving
/// budget, the last rate is trained to completion as a best effort.
pub fn mlp_train(
    rows: &[[f64; FEATURE_COUNT]],
    labels: &[i8],
    cfg: &TrainConfig,
) -> Result<MlpModel, TrainError> {
    check_binary_data(rows, labels)?;
    assert!(!cfg.hidden_sizes.is_empty(), "MLP needs a hidden layer");
    let mut lr = cfg.learning_rate;
    for _ in 0..MAX_HALVINGS {
        match train_once(rows, labels, cfg, lr, true) {
            Ok(model) => return Ok(model),
            Err(_) => lr *= 0.5,
        }
    }
    train_once(rows, labels, cfg, lr, false).map_err(|_| TrainError::DivergedLoss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn unit_row(hot: usize) -> Vec<f64> {
        let mut row = vec![0.0; FEATURE_COUNT];
        row[hot] = 1.0;
        row
    }

    #[test]
    fn softmax_output_ordering_follows_logits() {
        // Single layer picking coordinates 0 and 1 as the two logits.
        let model = MlpModel {
            layers: vec![Layer {
                weights: vec![unit_row(0), unit_row(1)],
                biases: vec![0.0, 0.0],
                activation: Activation::Softmax,
            }],
            loss_history: Vec::new(),
            learning_rate_used: 0.0,
        };
        let mut lo_hi = [0.0; FEATURE_COUNT];
        lo_hi[0] = -1.0;
        lo_hi[1] = 2.0;
        let p = model.forward(&lo_hi);
        assert!(p[1] > p[0]);
        let mut hi_lo = [0.0; FEATURE_COUNT];
        hi_lo[0] = 3.0;
        hi_lo[1] = 0.5;
        let p = model.forward(&hi_lo);
        assert!(p[0] > p[1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut model = MlpModel::random_init(&[FEATURE_COUNT, 4, 2], 99);
        let eps = 1e-5;
        for probe in 0..10 {
            let x: [[f64; FEATURE_COUNT]; 1] = [std::array::from_fn(|_| rng.gen_range(-2.0..2.0))];
            let y = [if probe % 2 == 0 { 1 } else { -1 }];
            let grads = loss_gradients(&model, &x, &y);
            for (l, grad_layer) in grads.iter().enumerate() {
                for o in 0..model.layers[l].biases.len() {
                    for i in 0..model.layers[l].weights[o].len() {
                        let w = model.layers[l].weights[o][i];
                        model.layers[l].weights[o][i] = w + eps;
                        let up = mlp_loss(&model, &x, &y);
                        model.layers[l].weights[o][i] = w - eps;
                        let down = mlp_loss(&model, &x, &y);
                        model.layers[l].weights[o][i] = w;
                        let numeric = (up - down) / (2.0 * eps);
                        let analytic = grad_layer.weights[o][i];
                        let rel = (analytic - numeric).abs()
                            / analytic.abs().max(numeric.abs()).max(1e-5);
                        assert!(
                            rel < 1e-4,
                            "gradient mismatch at layer {l} w[{o}][{i}]: \
                             analytic {analytic} vs numeric {numeric}"
                        );
                    }
                }
            }
        }
    }

    /// Two well-separated Gaussian blobs via Box-Muller sampling.
    fn blobs(n: usize, seed: u64) -> (Vec<[f64; FEATURE_COUNT]>, Vec<i8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = move || {
            let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for k in 0..n {
            let (mean, y) = if k % 2 == 0 { (3.0, 1) } else { (-3.0, -1) };
            rows.push(std::array::from_fn(|_| mean + normal()));
            labels.push(y);
        }
        (rows, labels)
    }

    fn training_accuracy(model: &MlpModel, rows: &[[f64; FEATURE_COUNT]], labels: &[i8]) -> f64 {
        let correct = rows
            .iter()
            .zip(labels)
            .filter(|(x, &y)| (model.decision(x) > 0.0) == (y == 1))
            .count();
        correct as f64 / rows.len() as f64
    }

    #[test]
    fn separated_blobs_reach_high_training_accuracy() {
        let (rows, labels) = blobs(200, 5);
        let cfg = TrainConfig::default();
        let model = mlp_train(&rows, &labels, &cfg).unwrap();
        assert!(
            training_accuracy(&model, &rows, &labels) >= 0.99,
            "blobs should be essentially perfectly fit"
        );
        assert_eq!(model.loss_history.len(), cfg.epochs + 1);
    }

    #[test]
    fn training_loss_is_non_increasing() {
        let (rows, labels) = blobs(120, 8);
        let model = mlp_train(&rows, &labels, &TrainConfig::default()).unwrap();
        for pair in model.loss_history.windows(2) {
            assert!(
                !rose(pair[1], pair[0]),
                "loss rose from {} to {}",
                pair[0],
                pair[1]
            );
        }
    }

    #[test]
    fn unstable_learning_rate_is_halved_until_stable() {
        // Heavily overlapping classes: the optimum has strictly positive
        // loss, so a giant step overshoots every epoch and oscillates
        // (well-separated blobs would saturate monotonically instead).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for k in 0..120 {
            let (mean, y) = if k % 2 == 0 { (0.3, 1) } else { (-0.3, -1) };
            rows.push(std::array::from_fn(|_| mean + rng.gen_range(-1.0..1.0)));
            labels.push(y);
        }
        let cfg = TrainConfig {
            learning_rate: 1000.0,
            epochs: 40,
            ..TrainConfig::default()
        };
        let model = mlp_train(&rows, &labels, &cfg).unwrap();
        assert!(
            model.learning_rate_used < cfg.learning_rate,
            "an absurd learning rate cannot pass the stability check"
        );
        for pair in model.loss_history.windows(2) {
            assert!(!rose(pair[1], pair[0]));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (rows, labels) = blobs(80, 4);
        let cfg = TrainConfig {
            epochs: 30,
            ..TrainConfig::default()
        };
        let a = mlp_train(&rows, &labels, &cfg).unwrap();
        let b = mlp_train(&rows, &labels, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_features_surface_as_divergence() {
        let (mut rows, labels) = blobs(40, 6);
        rows[3][2] = f64::NAN;
        assert_eq!(
            mlp_train(&rows, &labels, &TrainConfig::default()).unwrap_err(),
            TrainError::DivergedLoss
        );
    }

    #[test]
    fn single_class_data_is_rejected() {
        let rows = vec![[0.0; FEATURE_COUNT]; 4];
        assert_eq!(
            mlp_train(&rows, &[1, 1, 1, 1], &TrainConfig::default()).unwrap_err(),
            TrainError::SingleClassData
        );
    }
}
