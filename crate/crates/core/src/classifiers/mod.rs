//! The three classifier families — kernel SVM, multilayer perceptron, and
//! RBF network — behind one enum, plus the shared math and training config.

pub mod mlp;
pub mod model_io;
pub mod rbfnet;
pub mod svm;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dns::Label;
use crate::features::FEATURE_COUNT;

pub use mlp::MlpModel;
pub use model_io::{load_model, save_model, ModelBundle, ModelIoError};
pub use rbfnet::{HiddenActivation, RbfNetModel};
pub use svm::SvmModel;

/// Which classifier family a model or training run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Svm,
    Mlp,
    #[serde(rename = "rbfnet")]
    RbfNet,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [
        ClassifierKind::Svm,
        ClassifierKind::Mlp,
        ClassifierKind::RbfNet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Svm => "svm",
            ClassifierKind::Mlp => "mlp",
            ClassifierKind::RbfNet => "rbfnet",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "svm" => Ok(ClassifierKind::Svm),
            "mlp" => Ok(ClassifierKind::Mlp),
            "rbfnet" => Ok(ClassifierKind::RbfNet),
            other => Err(format!("unknown model kind `{other}` (svm|mlp|rbfnet)")),
        }
    }
}

/// SVM kernel choice for [`TrainConfig`]; the gamma for `Rbf` comes from
/// the config so one `--gamma` flag drives both grid search and training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    Linear,
    Rbf,
}

impl FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(KernelKind::Linear),
            "rbf" => Ok(KernelKind::Rbf),
            other => Err(format!("unknown kernel `{other}` (linear|rbf)")),
        }
    }
}

/// A concrete kernel function as stored in a trained SVM model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn eval(&self, a: &[f64; FEATURE_COUNT], b: &[f64; FEATURE_COUNT]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => rbf_kernel(a, b, gamma),
        }
    }
}

/// Hyperparameters for all three trainers. Each family reads the fields it
/// needs and ignores the rest, so one config (and one CLI flag set) covers
/// every `--model` choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// SVM box constraint.
    pub c: f64,
    /// RBF kernel width (SVM only).
    pub gamma: f64,
    /// KKT tolerance for the SVM dual solver.
    pub tolerance: f64,
    /// Budget of SVM working-set pair updates before giving up.
    pub max_passes: usize,
    /// Seed for every randomized step (init, shuffling, center seeding).
    pub seed: u64,
    /// Initial MLP learning rate; halved automatically if training is unstable.
    pub learning_rate: f64,
    /// MLP training epochs.
    pub epochs: usize,
    /// MLP mini-batch size.
    pub batch_size: usize,
    /// MLP hidden layer widths.
    pub hidden_sizes: Vec<usize>,
    /// RBF network center count.
    pub centers: usize,
    /// Regularization strength for the RBF network least-squares solve.
    pub ridge: f64,
    /// SVM kernel.
    pub kernel: KernelKind,
    /// RBF network hidden activation variant.
    pub rbf_hidden: HiddenActivation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            c: 10.0,
            gamma: 1.0 / FEATURE_COUNT as f64,
            tolerance: 1e-3,
            // Generous for datasets that converge, but bounded: corpora with
            // near-duplicate rows can polish KKT conditions almost forever
            // with no measurable accuracy gain, so training stops at the best
            // iterate instead (flagged by `SvmModel::converged`).
            max_passes: 40_000,
            seed: 42,
            learning_rate: 0.5,
            epochs: 200,
            batch_size: 32,
            hidden_sizes: vec![16],
            centers: 20,
            ridge: 1e-3,
            kernel: KernelKind::Rbf,
            rbf_hidden: HiddenActivation::Softmax,
        }
    }
}

impl TrainConfig {
    pub fn kernel(&self) -> Kernel {
        match self.kernel {
            KernelKind::Linear => Kernel::Linear,
            KernelKind::Rbf => Kernel::Rbf { gamma: self.gamma },
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training set has {rows} rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
    #[error("training set contains a single class; both labels are required")]
    SingleClassData,
    #[error("training loss diverged (NaN or infinity encountered)")]
    DivergedLoss,
    #[error("center selection stayed degenerate after {0} restarts")]
    DegenerateCenters(usize),
}

/// Shared precondition for all trainers: aligned rows/labels, labels in
/// {-1,+1}, and both classes present.
pub(crate) fn check_binary_data(
    rows: &[[f64; FEATURE_COUNT]],
    labels: &[i8],
) -> Result<(), TrainError> {
    if rows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if rows.len() != labels.len() {
        return Err(TrainError::LengthMismatch {
            rows: rows.len(),
            labels: labels.len(),
        });
    }
    if labels.iter().any(|l| *l != -1 && *l != 1) {
        return Err(TrainError::SingleClassData);
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(TrainError::SingleClassData);
    }
    Ok(())
}

/// Numerically safe softmax: shifts by the max before exponentiating so
/// inputs of magnitude several hundred cannot overflow.
pub fn softmax(a: &[f64]) -> Vec<f64> {
    let max = a.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = a.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("basis radius must be positive")]
pub struct NonPositiveRadius;

/// Scalar Gaussian basis exp(-(x-c)^2 / r^2); 1 exactly at the center.
pub fn gaussian_basis(x: f64, c: f64, r: f64) -> Result<f64, NonPositiveRadius> {
    if r <= 0.0 {
        return Err(NonPositiveRadius);
    }
    Ok((-((x - c) * (x - c)) / (r * r)).exp())
}

/// RBF kernel exp(-gamma * ||x1 - x2||^2).
pub fn rbf_kernel(x1: &[f64; FEATURE_COUNT], x2: &[f64; FEATURE_COUNT], gamma: f64) -> f64 {
    (-gamma * squared_distance(x1, x2)).exp()
}

pub(crate) fn squared_distance(a: &[f64; FEATURE_COUNT], b: &[f64; FEATURE_COUNT]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

/// A trained model of any family. Decisions share one convention: the score
/// is positive for legitimate domains and negative for fast-flux, and an
/// exact zero resolves to fast-flux (fail toward flagging).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ClassifierModel {
    #[serde(rename = "svm")]
    Svm(SvmModel),
    #[serde(rename = "mlp")]
    Mlp(MlpModel),
    #[serde(rename = "rbfnet")]
    RbfNet(RbfNetModel),
}

impl ClassifierModel {
    pub fn kind(&self) -> ClassifierKind {
        match self {
            ClassifierModel::Svm(_) => ClassifierKind::Svm,
            ClassifierModel::Mlp(_) => ClassifierKind::Mlp,
            ClassifierModel::RbfNet(_) => ClassifierKind::RbfNet,
        }
    }

    /// Signed decision score for one scaled feature vector.
    pub fn decision(&self, x: &[f64; FEATURE_COUNT]) -> f64 {
        match self {
            ClassifierModel::Svm(m) => m.decision(x),
            ClassifierModel::Mlp(m) => m.decision(x),
            ClassifierModel::RbfNet(m) => m.forward(x),
        }
    }

    /// Class for one scaled feature vector; score 0 resolves to fast-flux.
    pub fn predict(&self, x: &[f64; FEATURE_COUNT]) -> Label {
        if self.decision(x) > 0.0 {
            Label::Legitimate
        } else {
            Label::FastFlux
        }
    }

    /// Trains a model of the requested family on scaled rows.
    pub fn train(
        kind: ClassifierKind,
        rows: &[[f64; FEATURE_COUNT]],
        labels: &[i8],
        cfg: &TrainConfig,
    ) -> Result<ClassifierModel, TrainError> {
        match kind {
            ClassifierKind::Svm => svm::svm_train(rows, labels, cfg).map(ClassifierModel::Svm),
            ClassifierKind::Mlp => mlp::mlp_train(rows, labels, cfg).map(ClassifierModel::Mlp),
            ClassifierKind::RbfNet => {
                rbfnet::rbfnet_train(rows, labels, cfg).map(ClassifierModel::RbfNet)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_symmetric_and_shift_invariant() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let uniform = softmax(&[7.3, 7.3, 7.3]);
        for p in uniform {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_matches_closed_form() {
        let p = softmax(&[1.0, 2.0]);
        let e = std::f64::consts::E;
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-12);
        assert!((p[0] - 0.26894).abs() < 1e-5);
        assert!((p[1] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_survives_huge_inputs() {
        for scale in [100.0, 700.0] {
            let p = softmax(&[scale, -scale, 0.0]);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gaussian_basis_known_values() {
        assert_eq!(gaussian_basis(3.0, 3.0, 2.0), Ok(1.0));
        let unit = gaussian_basis(1.0, 0.0, 1.0).unwrap();
        assert!((unit - (-1.0f64).exp()).abs() < 1e-15);
        assert!((unit - 0.36788).abs() < 1e-5);
        let far = gaussian_basis(2.0, 0.0, 1.0).unwrap();
        assert!((far - (-4.0f64).exp()).abs() < 1e-15);
        assert!((far - 0.018316).abs() < 1e-6);
    }

    #[test]
    fn gaussian_basis_rejects_bad_radius() {
        assert_eq!(gaussian_basis(1.0, 0.0, 0.0), Err(NonPositiveRadius));
        assert_eq!(gaussian_basis(1.0, 0.0, -2.0), Err(NonPositiveRadius));
    }

    #[test]
    fn rbf_kernel_matches_naive_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a: [f64; FEATURE_COUNT] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
            let b: [f64; FEATURE_COUNT] = std::array::from_fn(|_| rng.gen_range(-5.0..5.0));
            let gamma = rng.gen_range(0.01..10.0);
            let mut d2 = 0.0;
            for j in 0..FEATURE_COUNT {
                d2 += (a[j] - b[j]) * (a[j] - b[j]);
            }
            let expected = (-gamma * d2).exp();
            let k = rbf_kernel(&a, &b, gamma);
            assert!((k - expected).abs() <= 1e-15 * expected.max(1.0));
            assert_eq!(k, rbf_kernel(&b, &a, gamma), "kernel must be symmetric");
            assert!((0.0..=1.0).contains(&k));
            // Strict positivity holds whenever the exponent stays above
            // the f64 underflow threshold.
            if gamma * d2 < 700.0 {
                assert!(k > 0.0);
            }
        }
    }

    #[test]
    fn rbf_kernel_is_one_at_zero_distance() {
        let x = [0.5; FEATURE_COUNT];
        assert_eq!(rbf_kernel(&x, &x, 2.0), 1.0);
        let mut y = [0.0; FEATURE_COUNT];
        y[0] = 1.0;
        let x0 = [0.0; FEATURE_COUNT];
        assert!((rbf_kernel(&x0, &y, 1.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kind_parsing_round_trips() {
        for kind in ClassifierKind::ALL {
            assert_eq!(kind.as_str().parse::<ClassifierKind>().unwrap(), kind);
        }
        assert!("forest".parse::<ClassifierKind>().is_err());
    }

    #[test]
    fn binary_data_preconditions() {
        let rows = vec![[0.0; FEATURE_COUNT]; 2];
        assert_eq!(
            check_binary_data(&[], &[]),
            Err(TrainError::EmptyTrainingSet)
        );
        assert_eq!(
            check_binary_data(&rows, &[1]),
            Err(TrainError::LengthMismatch { rows: 2, labels: 1 })
        );
        assert_eq!(
            check_binary_data(&rows, &[1, 1]),
            Err(TrainError::SingleClassData)
        );
        assert_eq!(
            check_binary_data(&rows, &[1, 0]),
            Err(TrainError::SingleClassData)
        );
        assert_eq!(check_binary_data(&rows, &[1, -1]), Ok(()));
    }
}
