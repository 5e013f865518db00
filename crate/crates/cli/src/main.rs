//! `fluxgate`: fast-flux domain detection from single DNS responses.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error (unreadable or
//! malformed inputs), 3 training failure.

use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fluxgate_core::classifiers::{
    load_model, save_model, ClassifierKind, ClassifierModel, HiddenActivation, KernelKind,
    ModelBundle, TrainConfig,
};
use fluxgate_core::dns::parse_json_record;
use fluxgate_core::eval::{
    evaluate, grid_search, render_table, EvalOptions, EvaluationReport, GridSpec,
};
use fluxgate_core::features::{extract, Dataset, Scaler, ScalerMode};
use fluxgate_core::geo::GeoStore;
use fluxgate_core::io_util::{IngestMode, IngestStats};
use fluxgate_core::pipeline::{Pipeline, StreamOptions};
use fluxgate_core::scan::ScanStore;
use fluxgate_core::synth::{generate, SynthConfig};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TRAINING: u8 = 3;

enum CliError {
    Usage(String),
    Data(String),
    Training(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Training(_) => EXIT_TRAINING,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Training(m) => m,
        }
    }
}

/// Anything that goes wrong while reading or parsing inputs is a data error.
fn data_err(e: impl std::fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

#[derive(Parser)]
#[command(
    name = "fluxgate",
    version,
    about = "Fast-flux domain detection from single DNS responses",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and summarize an internet-scan snapshot (JSONL, may be .gz).
    IngestCensys {
        file: PathBuf,
        /// Abort on the first malformed line instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Validate and summarize an IP-to-ASN/country range database (TSV, may be .gz).
    IngestGeo {
        file: PathBuf,
        /// Abort on the first malformed line instead of skipping it.
        #[arg(long)]
        strict: bool,
    },
    /// Extract labeled feature vectors from observations into a CSV.
    Extract {
        /// DNS observations, one JSON record per line (may be .gz).
        #[arg(long)]
        obs: PathBuf,
        /// Internet-scan snapshot file.
        #[arg(long)]
        censys: PathBuf,
        /// IP range database file.
        #[arg(long)]
        geo: PathBuf,
        /// Output feature CSV.
        #[arg(long)]
        out: PathBuf,
        /// Suspicious gate: minimum A records for a row to be extracted.
        #[arg(long, default_value_t = fluxgate_core::dns::DEFAULT_GATE_THRESHOLD)]
        gate: usize,
    },
    /// Train a classifier on a feature CSV and save the model.
    Train {
        #[arg(long)]
        features: PathBuf,
        /// Classifier family: svm, mlp, or rbfnet.
        #[arg(long)]
        model: ClassifierKind,
        /// Output model file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Cross-validate a classifier family on a feature CSV.
    Evaluate {
        #[arg(long)]
        features: PathBuf,
        /// Classifier family: svm, mlp, or rbfnet.
        #[arg(long = "model-kind")]
        model_kind: ClassifierKind,
        /// Run a C/gamma grid search first and report the best setting.
        #[arg(long)]
        grid: bool,
        /// Number of cross-validation folds.
        #[arg(long, default_value_t = 10)]
        folds: usize,
        /// Cap the rows used during the grid search (stratified subsample).
        #[arg(long)]
        grid_subsample: Option<usize>,
        #[command(flatten)]
        hyper: HyperArgs,
    },
    /// Classify observations with a trained model (verdicts as JSON lines).
    Classify {
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        /// DNS observations, one JSON record per line (may be .gz).
        #[arg(long)]
        obs: PathBuf,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Serve the classifier over stdin/stdout or a local Unix socket.
    Serve {
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        /// Listen on this Unix socket path instead of stdin/stdout.
        #[arg(long)]
        socket: Option<PathBuf>,
        /// Stop after serving this many socket connections.
        #[arg(long)]
        max_connections: Option<usize>,
        #[command(flatten)]
        runtime: RuntimeArgs,
    },
    /// Generate a synthetic labeled corpus with matching databases.
    Synth {
        /// Corpus recipe (JSON). Defaults to the built-in reference corpus.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Hyperparameters shared by `train` and `evaluate`. Every flag is
/// optional; unset flags keep the built-in defaults.
#[derive(Args)]
struct HyperArgs {
    /// SVM box constraint.
    #[arg(long = "C")]
    c: Option<f64>,
    /// RBF kernel width.
    #[arg(long)]
    gamma: Option<f64>,
    /// Seed for every randomized training step.
    #[arg(long)]
    seed: Option<u64>,
    /// SVM kernel: linear or rbf.
    #[arg(long)]
    kernel: Option<KernelKind>,
    /// KKT tolerance for the SVM solver.
    #[arg(long)]
    tolerance: Option<f64>,
    /// SVM pair-update budget.
    #[arg(long)]
    max_passes: Option<usize>,
    /// Initial MLP learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// MLP training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// MLP mini-batch size.
    #[arg(long)]
    batch_size: Option<usize>,
    /// MLP hidden layer widths, comma separated (e.g. 16,8).
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// RBF network center count.
    #[arg(long)]
    centers: Option<usize>,
    /// RBF network ridge regularization.
    #[arg(long)]
    ridge: Option<f64>,
    /// RBF network hidden activation: gaussian or softmax.
    #[arg(long)]
    rbf_hidden: Option<HiddenActivation>,
    /// Feature scaling: minmax or zscore.
    #[arg(long, default_value = "minmax")]
    scaler: String,
}

impl HyperArgs {
    fn config(&self) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        set!(
            c,
            gamma,
            seed,
            kernel,
            tolerance,
            max_passes,
            learning_rate,
            epochs,
            batch_size,
            centers,
            ridge,
            rbf_hidden
        );
        if let Some(hidden) = &self.hidden {
            cfg.hidden_sizes = hidden.clone();
        }
        cfg
    }

    fn scaler_mode(&self) -> Result<ScalerMode, CliError> {
        match self.scaler.as_str() {
            "minmax" => Ok(ScalerMode::MinMax),
            "zscore" => Ok(ScalerMode::ZScore),
            other => Err(CliError::Usage(format!(
                "unknown scaler `{other}` (minmax|zscore)"
            ))),
        }
    }
}

/// Shared flags for the classifying commands.
#[derive(Args)]
struct RuntimeArgs {
    /// Internet-scan snapshot file.
    #[arg(long)]
    censys: PathBuf,
    /// IP range database file.
    #[arg(long)]
    geo: PathBuf,
    /// Suspicious gate: minimum A records before the model is consulted.
    #[arg(long, default_value_t = fluxgate_core::dns::DEFAULT_GATE_THRESHOLD)]
    gate: usize,
    /// Include per-record latency in the verdicts (output is then no
    /// longer byte-reproducible).
    #[arg(long)]
    timing: bool,
    /// Worker threads (default: FLUXGATE_THREADS or available cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes, anything else is a
            // usage error.
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fluxgate: error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn describe_ingest(what: &str, stats: &IngestStats) {
    println!(
        "{what}: {} records from {} lines ({} malformed line(s) skipped)",
        stats.records_loaded,
        stats.lines_read,
        stats.malformed_lines.len()
    );
}

fn ingest_mode(strict: bool) -> IngestMode {
    if strict {
        IngestMode::Strict
    } else {
        IngestMode::Lenient
    }
}

fn load_scan(path: &Path) -> Result<ScanStore, CliError> {
    let (store, _) = ScanStore::ingest_path(path, IngestMode::Lenient).map_err(data_err)?;
    Ok(store)
}

fn load_geo(path: &Path) -> Result<GeoStore, CliError> {
    let (store, _) = GeoStore::ingest_path(path, IngestMode::Lenient).map_err(data_err)?;
    Ok(store)
}

fn load_bundle(path: &Path) -> Result<ModelBundle, CliError> {
    load_model(path).map_err(data_err)
}

fn stream_options(runtime: &RuntimeArgs) -> StreamOptions {
    let mut opts = StreamOptions {
        include_timing: runtime.timing,
        ..StreamOptions::default()
    };
    if let Some(threads) = runtime.threads {
        opts.workers = threads.max(1);
    }
    opts
}

fn build_pipeline(model: &Path, runtime: &RuntimeArgs) -> Result<Pipeline, CliError> {
    let bundle = load_bundle(model)?;
    let scan = load_scan(&runtime.censys)?;
    let geo = load_geo(&runtime.geo)?;
    Ok(Pipeline::new(scan, geo, bundle).with_gate_threshold(runtime.gate))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::IngestCensys { file, strict } => {
            let (store, stats) =
                ScanStore::ingest_path(&file, ingest_mode(strict)).map_err(data_err)?;
            describe_ingest("snapshot", &stats);
            println!("distinct hosts: {}", store.len());
            Ok(())
        }
        Command::IngestGeo { file, strict } => {
            let (store, stats) =
                GeoStore::ingest_path(&file, ingest_mode(strict)).map_err(data_err)?;
            describe_ingest("geo ranges", &stats);
            println!("ranges loaded: {}", store.len());
            Ok(())
        }
        Command::Extract {
            obs,
            censys,
            geo,
            out,
            gate,
        } => cmd_extract(&obs, &censys, &geo, &out, gate),
        Command::Train {
            features,
            model,
            out,
            hyper,
        } => cmd_train(&features, model, &out, &hyper),
        Command::Evaluate {
            features,
            model_kind,
            grid,
            folds,
            grid_subsample,
            hyper,
        } => cmd_evaluate(&features, model_kind, grid, folds, grid_subsample, &hyper),
        Command::Classify {
            model,
            obs,
            runtime,
        } => {
            let pipeline = build_pipeline(&model, &runtime)?;
            let input = fluxgate_core::io_util::open_maybe_gzip(&obs).map_err(data_err)?;
            let stdout = io::stdout().lock();
            let summary = pipeline
                .classify_stream(input, stdout, &stream_options(&runtime))
                .map_err(data_err)?;
            eprintln!(
                "classified {} record(s), {} error verdict(s)",
                summary.records, summary.errors
            );
            Ok(())
        }
        Command::Serve {
            model,
            socket,
            max_connections,
            runtime,
        } => {
            let pipeline = build_pipeline(&model, &runtime)?;
            let opts = stream_options(&runtime);
            match socket {
                Some(path) => {
                    eprintln!("listening on {}", path.display());
                    pipeline
                        .serve_unix(&path, &opts, max_connections)
                        .map_err(data_err)
                }
                None => {
                    // `Stdin` (not its lock) is `Send`, which the streaming
                    // reader thread requires.
                    let stdin = BufReader::new(io::stdin());
                    let stdout = io::stdout().lock();
                    pipeline
                        .classify_stream(stdin, stdout, &opts)
                        .map_err(data_err)?;
                    Ok(())
                }
            }
        }
        Command::Synth { config, out } => cmd_synth(config.as_deref(), &out),
    }
}

fn cmd_extract(
    obs: &Path,
    censys: &Path,
    geo: &Path,
    out: &Path,
    gate: usize,
) -> Result<(), CliError> {
    let scan = load_scan(censys)?;
    let geo = load_geo(geo)?;
    let reader = fluxgate_core::io_util::open_maybe_gzip(obs).map_err(data_err)?;

    let mut data = Dataset::default();
    let mut below_gate = 0usize;
    let mut unlabeled = 0usize;
    for (idx, line) in io::BufRead::lines(reader).enumerate() {
        let line = line.map_err(data_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_json_record(&line)
            .map_err(|e| CliError::Data(format!("observation line {}: {e}", idx + 1)))?;
        let Some(signed) = record.label.signed() else {
            unlabeled += 1;
            continue;
        };
        if record.a_records.len() < gate {
            below_gate += 1;
            continue;
        }
        let lookup = scan.lookup(&record.a_records).map_err(data_err)?;
        let summary = geo.summarize(&record.a_records).map_err(data_err)?;
        let fv = extract(&record, lookup, summary).map_err(data_err)?;
        data.rows.push(fv.to_array());
        data.labels.push(signed);
    }
    data.write_csv_path(out).map_err(data_err)?;
    let flux = data.labels.iter().filter(|&&y| y == -1).count();
    println!(
        "wrote {} rows ({} fastflux, {} legit) to {}; skipped {} below gate, {} unlabeled",
        data.len(),
        flux,
        data.len() - flux,
        out.display(),
        below_gate,
        unlabeled
    );
    Ok(())
}

fn cmd_train(
    features: &Path,
    kind: ClassifierKind,
    out: &Path,
    hyper: &HyperArgs,
) -> Result<(), CliError> {
    let data = Dataset::read_csv_path(features).map_err(data_err)?;
    let cfg = hyper.config();
    let scaler =
        Scaler::fit(&data.rows, hyper.scaler_mode()?).map_err(|e| CliError::Data(e.to_string()))?;
    let scaled: Vec<_> = data.rows.iter().map(|r| scaler.apply(r)).collect();
    let classifier = ClassifierModel::train(kind, &scaled, &data.labels, &cfg)
        .map_err(|e| CliError::Training(e.to_string()))?;

    match &classifier {
        ClassifierModel::Svm(m) => println!(
            "trained svm: {} support vectors, converged: {}",
            m.num_support_vectors(),
            m.converged
        ),
        ClassifierModel::Mlp(m) => println!(
            "trained mlp: final loss {:.6}, learning rate {}",
            m.loss_history.last().copied().unwrap_or(f64::NAN),
            m.learning_rate_used
        ),
        ClassifierModel::RbfNet(m) => {
            println!("trained rbfnet: {} centers", m.centers.len())
        }
    }
    let bundle = ModelBundle {
        scaler,
        classifier,
        config: cfg,
    };
    save_model(&bundle, out).map_err(data_err)?;
    println!("saved model to {}", out.display());
    Ok(())
}

fn cmd_evaluate(
    features: &Path,
    kind: ClassifierKind,
    grid: bool,
    folds: usize,
    grid_subsample: Option<usize>,
    hyper: &HyperArgs,
) -> Result<(), CliError> {
    let data = Dataset::read_csv_path(features).map_err(data_err)?;
    let mut cfg = hyper.config();
    if grid {
        let spec = GridSpec {
            subsample: grid_subsample,
            ..GridSpec::default()
        };
        let result = grid_search(&data, kind, &cfg, &spec, folds).map_err(data_err)?;
        for o in &result.outcomes {
            eprintln!(
                "grid C={:<8} gamma={:<8} accuracy={:.4} fnr={:.4}",
                o.config.c, o.config.gamma, o.report.accuracy, o.report.fnr
            );
        }
        eprintln!("grid best: C={} gamma={}", result.best.c, result.best.gamma);
        cfg = result.best;
    }
    let opts = EvalOptions {
        folds,
        ..EvalOptions::default()
    };
    let report = evaluate(&data, kind, &cfg, &opts).map_err(data_err)?;
    print_report(&report)
}

fn print_report(report: &EvaluationReport) -> Result<(), CliError> {
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{}", report.stable_json()).map_err(data_err)?;
    writeln!(stdout, "{}", render_table(&[report])).map_err(data_err)?;
    Ok(())
}

fn cmd_synth(config: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let config = match config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(data_err)?;
            serde_json::from_str::<SynthConfig>(&text)
                .map_err(|e| CliError::Data(format!("bad synth config: {e}")))?
        }
        None => SynthConfig::default_corpus(),
    };
    let corpus = generate(&config).map_err(data_err)?;
    let paths = corpus.write_to_dir(out).map_err(data_err)?;
    // Record the effective recipe next to the corpus for reproducibility.
    let recipe = out.join("synth.config.json");
    std::fs::write(
        &recipe,
        serde_json::to_string_pretty(&config).expect("config serializes"),
    )
    .map_err(data_err)?;
    println!(
        "wrote {} observations, {} snapshot hosts, {} geo ranges under {}",
        corpus.observations.len(),
        corpus.snapshot.len(),
        corpus.geo.len(),
        out.display()
    );
    println!(
        "files: {}, {}, {}, {}",
        paths.observations.display(),
        paths.snapshot.display(),
        paths.geo.display(),
        recipe.display()
    );
    Ok(())
}
