//! Shared fixtures for the criterion benches: a mid-sized synthetic corpus
//! and a pipeline trained on it.

use fluxgate_core::classifiers::{ClassifierKind, ClassifierModel, ModelBundle, TrainConfig};
use fluxgate_core::features::{Scaler, ScalerMode};
use fluxgate_core::pipeline::Pipeline;
use fluxgate_core::synth::{generate, Cohort, IntRange, SynthConfig, SynthCorpus};

/// A corpus with the default recipe's class shapes but smaller counts, so
/// bench setup stays in seconds.
pub fn bench_corpus(flux: usize, legit: usize) -> SynthCorpus {
    let config = SynthConfig {
        seed: 1405,
        flux: vec![Cohort {
            count: flux,
            domain_length: IntRange::new(13, 32),
            ip_count: IntRange::new(8, 20),
            ttl: IntRange::new(30, 900),
            scan_presence: 0.70,
            network_blocks: IntRange::new(4, 16),
            countries: ["RU", "UA", "TR", "VN", "BR", "IN"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            port_pool: (1024..1064).collect(),
            ports_per_host: IntRange::new(1, 3),
        }],
        legit: vec![Cohort {
            count: legit,
            domain_length: IntRange::new(6, 18),
            ip_count: IntRange::new(5, 12),
            ttl: IntRange::new(3600, 86_400),
            scan_presence: 0.98,
            network_blocks: IntRange::new(1, 2),
            countries: vec!["US".to_string(), "DE".to_string()],
            port_pool: vec![80, 443],
            ports_per_host: IntRange::new(1, 2),
        }],
    };
    generate(&config).expect("bench corpus generates")
}

/// Trains an SVM on the corpus and wraps it with warm stores.
pub fn trained_pipeline(corpus: &SynthCorpus) -> Pipeline {
    let data = corpus.to_dataset(5);
    let cfg = TrainConfig::default();
    let scaler = Scaler::fit(&data.rows, ScalerMode::MinMax).expect("rows are finite");
    let scaled: Vec<_> = data.rows.iter().map(|r| scaler.apply(r)).collect();
    let classifier = ClassifierModel::train(ClassifierKind::Svm, &scaled, &data.labels, &cfg)
        .expect("bench corpus is trainable");
    Pipeline::new(
        corpus.scan_store(),
        corpus.geo_store(),
        ModelBundle {
            scaler,
            classifier,
            config: cfg,
        },
    )
}
