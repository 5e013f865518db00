//! Stratified k-fold cross-validation, confusion metrics, permutation
//! feature importance, hyperparameter grid search, and report rendering.
//!
//! The positive class throughout is fast-flux (label -1): FPR counts
//! legitimate domains flagged as flux, FNR counts missed flux domains.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::classifiers::{
    ClassifierKind, ClassifierModel, KernelKind, ModelBundle, TrainConfig, TrainError,
};
use crate::dns::{DnsObservation, Label};
use crate::features::{Dataset, Scaler, ScalerMode, FEATURE_COUNT};
use crate::geo::GeoStore;
use crate::pipeline::Pipeline;
use crate::scan::ScanStore;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("{k}-fold cross-validation needs at least {k} examples, found {n}")]
    TooFewExamples { n: usize, k: usize },
    #[error("cross-validation needs at least 2 folds, got {0}")]
    TooFewFolds(usize),
    #[error("dataset must contain both classes")]
    SingleClassData,
    #[error("every fold failed to train; first error: {0}")]
    AllFoldsFailed(String),
    #[error("grid search requires a non-empty grid")]
    EmptyGrid,
}

/// Confusion counts with fast-flux (-1) as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub true_pos: usize,
    pub true_neg: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl ConfusionCounts {
    pub fn record(&mut self, truth: i8, predicted: Label) {
        let flagged = predicted == Label::FastFlux;
        match (truth, flagged) {
            (-1, true) => self.true_pos += 1,
            (-1, false) => self.false_neg += 1,
            (_, true) => self.false_pos += 1,
            (_, false) => self.true_neg += 1,
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.true_pos += other.true_pos;
        self.true_neg += other.true_neg;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
    }

    pub fn total(&self) -> usize {
        self.true_pos + self.true_neg + self.false_pos + self.false_neg
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.true_pos + self.true_neg) as f64 / self.total() as f64
    }

    /// Legitimate domains flagged as flux: FP / (FP + TN).
    pub fn fpr(&self) -> f64 {
        let denom = self.false_pos + self.true_neg;
        if denom == 0 {
            return 0.0;
        }
        self.false_pos as f64 / denom as f64
    }

    /// Missed flux domains: FN / (FN + TP).
    pub fn fnr(&self) -> f64 {
        let denom = self.false_neg + self.true_pos;
        if denom == 0 {
            return 0.0;
        }
        self.false_neg as f64 / denom as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub confusion: ConfusionCounts,
    pub accuracy: f64,
    pub fpr: f64,
    pub fnr: f64,
}

impl FoldMetrics {
    fn from_confusion(fold: usize, confusion: ConfusionCounts) -> FoldMetrics {
        FoldMetrics {
            fold,
            accuracy: confusion.accuracy(),
            fpr: confusion.fpr(),
            fnr: confusion.fnr(),
            confusion,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FailedFold {
    pub fold: usize,
    pub error: String,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub samples: usize,
}

/// Cross-validation report. Everything except `latency` is deterministic
/// for a given dataset and seed; [`EvaluationReport::stable_json`] strips
/// the wall-clock part so reports can be compared byte-for-byte.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub model_kind: ClassifierKind,
    pub config: TrainConfig,
    pub folds: Vec<FoldMetrics>,
    pub failed_folds: Vec<FailedFold>,
    /// Pooled confusion over all test folds; because every example is
    /// tested exactly once, the pooled rates are the example-weighted
    /// means of the fold rates.
    pub confusion: ConfusionCounts,
    pub accuracy: f64,
    pub fpr: f64,
    pub fnr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub importance: Option<[f64; FEATURE_COUNT]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with the timing section removed: byte-identical across runs
    /// with the same dataset and seed.
    pub fn stable_json(&self) -> String {
        let mut stripped = self.clone();
        stripped.latency = None;
        stripped.to_json()
    }

    /// Human-readable classifier name, including the variant that matters
    /// for the family (kernel or hidden activation).
    pub fn display_name(&self) -> String {
        match self.model_kind {
            ClassifierKind::Svm => match self.config.kernel {
                KernelKind::Rbf => "SVM (RBF kernel)".to_string(),
                KernelKind::Linear => "SVM (linear kernel)".to_string(),
            },
            ClassifierKind::Mlp => "MLP".to_string(),
            ClassifierKind::RbfNet => format!("RBF network ({})", self.config.rbf_hidden),
        }
    }
}

/// Aligned-text comparison table: one row per report.
pub fn render_table(reports: &[&EvaluationReport]) -> String {
    let mut out = format!(
        "{:<24} {:>10} {:>8} {:>8}\n",
        "Classifier", "Accuracy", "FPR", "FNR"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<24} {:>9.3}% {:>8.3} {:>8.3}\n",
            r.display_name(),
            r.accuracy * 100.0,
            r.fpr,
            r.fnr
        ));
    }
    out
}

/// Per-fold `(train indices, test indices)` pairs.
pub type FoldSplit = Vec<(Vec<usize>, Vec<usize>)>;

/// Stratified k-fold split. Indices are shuffled per class and dealt
/// round-robin with one cursor running across classes, so fold sizes
/// differ by at most one overall and per class.
pub fn kfold_split(labels: &[i8], k: usize, seed: u64) -> Result<FoldSplit, EvalError> {
    if k < 2 {
        return Err(EvalError::TooFewFolds(k));
    }
    let n = labels.len();
    if n < k {
        return Err(EvalError::TooFewExamples { n, k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; n];
    let mut cursor = 0usize;
    for class in [-1i8, 1] {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        for idx in members {
            fold_of[idx] = cursor % k;
            cursor += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (idx, &fold) in fold_of.iter().enumerate() {
                if fold == f {
                    test.push(idx);
                } else {
                    train.push(idx);
                }
            }
            (train, test)
        })
        .collect())
}

/// Fits the scaler and trains a model using only the given training rows.
/// Exposed so leakage tests can verify the artifacts ignore test rows.
pub fn train_fold(
    data: &Dataset,
    train_idx: &[usize],
    kind: ClassifierKind,
    cfg: &TrainConfig,
) -> Result<(Scaler, ClassifierModel), TrainError> {
    let rows: Vec<[f64; FEATURE_COUNT]> = train_idx.iter().map(|&i| data.rows[i]).collect();
    let labels: Vec<i8> = train_idx.iter().map(|&i| data.labels[i]).collect();
    let scaler =
        Scaler::fit(&rows, ScalerMode::MinMax).map_err(|_| TrainError::EmptyTrainingSet)?;
    let scaled: Vec<[f64; FEATURE_COUNT]> = rows.iter().map(|r| scaler.apply(r)).collect();
    let model = ClassifierModel::train(kind, &scaled, &labels, cfg)?;
    Ok((scaler, model))
}

fn test_fold(
    data: &Dataset,
    test_idx: &[usize],
    scaler: &Scaler,
    model: &ClassifierModel,
) -> ConfusionCounts {
    let mut confusion = ConfusionCounts::default();
    for &i in test_idx {
        let predicted = model.predict(&scaler.apply(&data.rows[i]));
        confusion.record(data.labels[i], predicted);
    }
    confusion
}

/// Stores plus probe observations for end-to-end latency measurement.
/// Probes should pass the suspicious gate, otherwise the model never runs
/// and the numbers only measure the gate.
pub struct LatencyFixture {
    pub scan: ScanStore,
    pub geo: GeoStore,
    pub observations: Vec<DnsObservation>,
}

pub struct EvalOptions {
    pub folds: usize,
    /// Permutation-importance repeats; 0 skips the importance section.
    pub importance_repeats: usize,
    pub latency: Option<LatencyFixture>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            folds: 10,
            importance_repeats: 5,
            latency: None,
        }
    }
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((n as f64 * q).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn measure_latency(fixture: &LatencyFixture, bundle: ModelBundle) -> LatencyStats {
    let pipeline = Pipeline::new(fixture.scan.clone(), fixture.geo.clone(), bundle);
    let mut samples: Vec<f64> = fixture
        .observations
        .iter()
        .map(|obs| {
            let start = std::time::Instant::now();
            let _ = pipeline.classify_observation(obs);
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    LatencyStats {
        mean_ms: samples.iter().sum::<f64>() / samples.len().max(1) as f64,
        median_ms: percentile(&samples, 0.50),
        p95_ms: percentile(&samples, 0.95),
        samples: samples.len(),
    }
}

/// Cross-validates one classifier family. Scalers are fitted per training
/// fold (no leakage); folds that fail to train are excluded from the
/// aggregate and reported. Feature importance and latency, when requested,
/// use the first successful fold's artifacts.
pub fn evaluate(
    data: &Dataset,
    kind: ClassifierKind,
    cfg: &TrainConfig,
    opts: &EvalOptions,
) -> Result<EvaluationReport, EvalError> {
    if data.labels.iter().all(|&l| l == 1) || data.labels.iter().all(|&l| l == -1) {
        return Err(EvalError::SingleClassData);
    }
    let splits = kfold_split(&data.labels, opts.folds, cfg.seed)?;

    let mut folds = Vec::new();
    let mut failed = Vec::new();
    let mut pooled = ConfusionCounts::default();
    let mut first_artifacts: Option<(Scaler, ClassifierModel, Vec<usize>)> = None;
    for (f, (train_idx, test_idx)) in splits.iter().enumerate() {
        match train_fold(data, train_idx, kind, cfg) {
            Ok((scaler, model)) => {
                let confusion = test_fold(data, test_idx, &scaler, &model);
                pooled.merge(&confusion);
                folds.push(FoldMetrics::from_confusion(f, confusion));
                if first_artifacts.is_none() {
                    first_artifacts = Some((scaler, model, test_idx.clone()));
                }
            }
            Err(e) => failed.push(FailedFold {
                fold: f,
                error: e.to_string(),
            }),
        }
    }
    let Some((scaler, model, holdout)) = first_artifacts else {
        return Err(EvalError::AllFoldsFailed(
            failed.first().map(|f| f.error.clone()).unwrap_or_default(),
        ));
    };

    let importance = (opts.importance_repeats > 0).then(|| {
        let rows: Vec<[f64; FEATURE_COUNT]> = holdout.iter().map(|&i| data.rows[i]).collect();
        let labels: Vec<i8> = holdout.iter().map(|&i| data.labels[i]).collect();
        permutation_importance(
            &model,
            &scaler,
            &rows,
            &labels,
            opts.importance_repeats,
            cfg.seed,
        )
    });
    let latency = opts.latency.as_ref().map(|fixture| {
        let bundle = ModelBundle {
            scaler: scaler.clone(),
            classifier: model.clone(),
            config: cfg.clone(),
        };
        measure_latency(fixture, bundle)
    });

    Ok(EvaluationReport {
        model_kind: kind,
        config: cfg.clone(),
        accuracy: pooled.accuracy(),
        fpr: pooled.fpr(),
        fnr: pooled.fnr(),
        confusion: pooled,
        folds,
        failed_folds: failed,
        importance,
        latency,
    })
}

/// Mean accuracy drop on held-out rows when one feature column is shuffled,
/// floored at zero and normalized to sum to 1 (uniform when nothing drops).
pub fn permutation_importance(
    model: &ClassifierModel,
    scaler: &Scaler,
    rows: &[[f64; FEATURE_COUNT]],
    labels: &[i8],
    repeats: usize,
    seed: u64,
) -> [f64; FEATURE_COUNT] {
    assert!(!rows.is_empty(), "importance needs a held-out set");
    assert!(repeats > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accuracy_of = |rows: &[[f64; FEATURE_COUNT]]| {
        let correct = rows
            .iter()
            .zip(labels)
            .filter(|(r, &y)| model.predict(&scaler.apply(r)).signed() == Some(y))
            .count();
        correct as f64 / rows.len() as f64
    };
    let baseline = accuracy_of(rows);

    let mut drops = [0.0; FEATURE_COUNT];
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for (j, drop) in drops.iter_mut().enumerate() {
        let mut total = 0.0;
        for _ in 0..repeats {
            order.shuffle(&mut rng);
            let mut permuted = rows.to_vec();
            for (row, &src) in permuted.iter_mut().zip(&order) {
                row[j] = rows[src][j];
            }
            total += baseline - accuracy_of(&permuted);
        }
        *drop = (total / repeats as f64).max(0.0);
    }

    let sum: f64 = drops.iter().sum();
    if sum > 0.0 {
        for d in &mut drops {
            *d /= sum;
        }
        drops
    } else {
        [1.0 / FEATURE_COUNT as f64; FEATURE_COUNT]
    }
}

/// Hyperparameter grid for [`grid_search`]; both axes are log-spaced by
/// default. `subsample` caps the rows used during the search (stratified,
/// deterministic) so wide grids stay affordable on large corpora.
#[derive(Debug, Clone)]
pub struct GridSpec {
    pub c_values: Vec<f64>,
    pub gamma_values: Vec<f64>,
    pub subsample: Option<usize>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            c_values: vec![0.1, 1.0, 10.0, 100.0],
            gamma_values: vec![0.01, 0.1, 1.0, 10.0],
            subsample: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub config: TrainConfig,
    pub report: EvaluationReport,
}

#[derive(Debug)]
pub struct GridSearchResult {
    pub best: TrainConfig,
    pub outcomes: Vec<GridOutcome>,
}

/// True when the challenger strictly beats the incumbent: higher accuracy,
/// then lower FNR, then smaller C.
fn candidate_wins(challenger: &GridOutcome, incumbent: &GridOutcome) -> bool {
    if challenger.report.accuracy != incumbent.report.accuracy {
        return challenger.report.accuracy > incumbent.report.accuracy;
    }
    if challenger.report.fnr != incumbent.report.fnr {
        return challenger.report.fnr < incumbent.report.fnr;
    }
    challenger.config.c < incumbent.config.c
}

/// Proportional per-class subsample of at most `limit` rows.
pub fn stratified_subsample(data: &Dataset, limit: usize, seed: u64) -> Dataset {
    if data.len() <= limit {
        return data.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(limit);
    for class in [-1i8, 1] {
        let mut members: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels[i] == class)
            .collect();
        let share = (members.len() * limit + data.len() / 2) / data.len();
        members.shuffle(&mut rng);
        members.truncate(share.max(1));
        keep.extend(members);
    }
    keep.sort_unstable();
    Dataset {
        rows: keep.iter().map(|&i| data.rows[i]).collect(),
        labels: keep.iter().map(|&i| data.labels[i]).collect(),
    }
}

/// During grid scoring the SVM pair-update budget is capped relative to the
/// sample size: configs in the degenerate corners (huge C with a wide-open
/// kernel) would otherwise burn the entire budget per fold only to lose the
/// comparison anyway. Capped runs still produce the best iterate found, and
/// score accordingly. The winning config is returned with the caller's full
/// budget for the final training.
const GRID_SCORING_PASSES_PER_ROW: usize = 30;

/// Exhaustive CV over the grid. Importance and latency are skipped inside
/// the search; re-evaluate the winning config for a full report.
pub fn grid_search(
    data: &Dataset,
    kind: ClassifierKind,
    base: &TrainConfig,
    grid: &GridSpec,
    folds: usize,
) -> Result<GridSearchResult, EvalError> {
    if grid.c_values.is_empty() || grid.gamma_values.is_empty() {
        return Err(EvalError::EmptyGrid);
    }
    let reduced;
    let search_data = match grid.subsample {
        Some(limit) if data.len() > limit => {
            reduced = stratified_subsample(data, limit, base.seed);
            &reduced
        }
        _ => data,
    };
    let opts = EvalOptions {
        folds,
        importance_repeats: 0,
        latency: None,
    };
    let scoring_passes = base
        .max_passes
        .min(GRID_SCORING_PASSES_PER_ROW * search_data.len().max(1));
    let mut outcomes = Vec::with_capacity(grid.c_values.len() * grid.gamma_values.len());
    let mut best: Option<usize> = None;
    for &c in &grid.c_values {
        for &gamma in &grid.gamma_values {
            let config = TrainConfig {
                c,
                gamma,
                ..base.clone()
            };
            let scoring = TrainConfig {
                max_passes: scoring_passes,
                ..config.clone()
            };
            let report = evaluate(search_data, kind, &scoring, &opts)?;
            let outcome = GridOutcome { config, report };
            if best.is_none() || candidate_wins(&outcome, &outcomes[best.unwrap()]) {
                best = Some(outcomes.len());
            }
            outcomes.push(outcome);
        }
    }
    let best = outcomes[best.expect("non-empty grid")].config.clone();
    Ok(GridSearchResult { best, outcomes })
}
