//! End-to-end classification: gate, store lookups, feature extraction,
//! scaling, and model decision — for single observations, batch files, and
//! a streaming server over stdin/stdout or a local Unix socket.
//!
//! Streaming uses an order-preserving worker pool with a bounded in-flight
//! window, so output order always matches input order regardless of thread
//! count. `FLUXGATE_THREADS` caps the pool size.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::UnixListener;
use std::path::Path;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::classifiers::ModelBundle;
use crate::dns::{is_suspicious, parse_json_record, DnsObservation, Label, DEFAULT_GATE_THRESHOLD};
use crate::features::{extract, FeatureVector};
use crate::geo::GeoStore;
use crate::scan::ScanStore;

/// Outcome class for one record. `NotSuspicious` means the gate rejected
/// the record before any model ran; `Error` marks records that could not
/// be processed at all (malformed input line, impossible lookup).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictLabel {
    FastFlux,
    Legitimate,
    NotSuspicious,
    Error,
}

/// Classification result for one input record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub domain: String,
    pub label: VerdictLabel,
    /// Raw decision value; positive means legitimate, zero or negative
    /// fast-flux. Absent when no model ran.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub decision_value: Option<f64>,
    /// Wall-clock processing time. Stripped by [`Verdict::stable_json`] so
    /// verdict streams can be compared byte-for-byte across runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub latency_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub feature_vector: Option<FeatureVector>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

impl Verdict {
    fn from_error(message: String) -> Verdict {
        Verdict {
            domain: String::new(),
            label: VerdictLabel::Error,
            decision_value: None,
            latency_ms: None,
            feature_vector: None,
            error: Some(message),
        }
    }

    /// Deterministic JSON line: identical input and model give identical
    /// bytes, because wall-clock timing is omitted.
    pub fn stable_json(&self) -> String {
        let mut stripped = self.clone();
        stripped.latency_ms = None;
        serde_json::to_string(&stripped).expect("verdict serializes")
    }

    /// JSON line including the measured latency.
    pub fn timed_json(&self) -> String {
        serde_json::to_string(self).expect("verdict serializes")
    }
}

/// Number of streaming workers: `FLUXGATE_THREADS` when set to a positive
/// integer, otherwise the machine's available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("FLUXGATE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(std::num::NonZeroUsize::get)
                .unwrap_or(1)
        })
}

pub struct StreamOptions {
    pub workers: usize,
    /// Emit `latency_ms` on each verdict. Off by default so batch output is
    /// reproducible byte-for-byte.
    pub include_timing: bool,
}

impl Default for StreamOptions {
    fn default() -> Self {
        StreamOptions {
            workers: worker_threads(),
            include_timing: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StreamSummary {
    pub records: usize,
    pub errors: usize,
}

/// Warm stores plus a trained model bundle, ready to classify.
pub struct Pipeline {
    scan: ScanStore,
    geo: GeoStore,
    bundle: ModelBundle,
    gate_threshold: usize,
}

impl Pipeline {
    pub fn new(scan: ScanStore, geo: GeoStore, bundle: ModelBundle) -> Pipeline {
        Pipeline {
            scan,
            geo,
            bundle,
            gate_threshold: DEFAULT_GATE_THRESHOLD,
        }
    }

    /// Overrides the suspicious-domain gate (minimum A records before the
    /// model is consulted).
    pub fn with_gate_threshold(mut self, threshold: usize) -> Pipeline {
        self.gate_threshold = threshold;
        self
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    /// Classifies one parsed observation: gate, snapshot and geo lookups,
    /// feature extraction, scaling, and the model decision.
    pub fn classify_observation(&self, obs: &DnsObservation) -> Verdict {
        let start = std::time::Instant::now();
        let domain = obs.canonical_domain();
        let latency = |start: std::time::Instant| {
            // Clamp to a measurable floor so model-invoked verdicts always
            // report strictly positive latency.
            Some((start.elapsed().as_secs_f64() * 1e3).max(1e-6))
        };

        if !is_suspicious(obs, self.gate_threshold) {
            return Verdict {
                domain,
                label: VerdictLabel::NotSuspicious,
                decision_value: None,
                latency_ms: latency(start),
                feature_vector: None,
                error: None,
            };
        }

        let looked_up = self
            .scan
            .lookup(&obs.a_records)
            .map_err(|e| e.to_string())
            .and_then(|scan| {
                let geo = self
                    .geo
                    .summarize(&obs.a_records)
                    .map_err(|e| e.to_string())?;
                extract(obs, scan, geo).map_err(|e| e.to_string())
            });
        let fv = match looked_up {
            Ok(fv) => fv,
            Err(message) => {
                let mut verdict = Verdict::from_error(message);
                verdict.domain = domain;
                verdict.latency_ms = latency(start);
                return verdict;
            }
        };

        let scaled = self.bundle.scaler.apply(&fv.to_array());
        let value = self.bundle.classifier.decision(&scaled);
        let label = match self.bundle.classifier.predict(&scaled) {
            Label::FastFlux => VerdictLabel::FastFlux,
            _ => VerdictLabel::Legitimate,
        };
        Verdict {
            domain,
            label,
            decision_value: Some(value),
            latency_ms: latency(start),
            feature_vector: Some(fv),
            error: None,
        }
    }

    /// Classifies one JSON-lines record; malformed lines become error
    /// verdicts rather than stopping the stream.
    pub fn classify_line(&self, line: &str) -> Verdict {
        match parse_json_record(line) {
            Ok(obs) => self.classify_observation(&obs),
            Err(e) => Verdict::from_error(e.to_string()),
        }
    }

    /// Classifies every observation in input order (single-threaded).
    pub fn classify_batch(&self, observations: &[DnsObservation]) -> Vec<Verdict> {
        observations
            .iter()
            .map(|obs| self.classify_observation(obs))
            .collect()
    }

    /// Streams JSON-lines records from `input` to verdict lines on
    /// `output`. Records are classified by a pool of `opts.workers`
    /// threads with a bounded in-flight window; verdicts are emitted in
    /// input order, so the byte stream is independent of the pool size.
    pub fn classify_stream<R, W>(
        &self,
        input: R,
        mut output: W,
        opts: &StreamOptions,
    ) -> io::Result<StreamSummary>
    where
        R: BufRead + Send,
        W: Write,
    {
        let workers = opts.workers.max(1);
        let window = (workers * 4).max(16);
        let (line_tx, line_rx) = mpsc::sync_channel::<(usize, String)>(window);
        let line_rx = Arc::new(Mutex::new(line_rx));
        let (verdict_tx, verdict_rx) = mpsc::channel::<(usize, Verdict)>();
        let read_error: Mutex<Option<io::Error>> = Mutex::new(None);

        let summary = std::thread::scope(|scope| -> io::Result<StreamSummary> {
            let read_error = &read_error;
            // The reader owns `line_tx`: when it finishes (EOF or error) the
            // channel closes and the workers drain out.
            scope.spawn(move || {
                for (seq, line) in input.lines().enumerate() {
                    match line {
                        Ok(line) => {
                            if line_tx.send((seq, line)).is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            *read_error.lock().unwrap() = Some(e);
                            break;
                        }
                    }
                }
            });

            for _ in 0..workers {
                let line_rx = Arc::clone(&line_rx);
                let verdict_tx = verdict_tx.clone();
                scope.spawn(move || loop {
                    let msg = line_rx.lock().unwrap().recv();
                    match msg {
                        Ok((seq, line)) => {
                            let verdict = self.classify_line(&line);
                            if verdict_tx.send((seq, verdict)).is_err() {
                                break;
                            }
                        }
                        Err(_) => break,
                    }
                });
            }
            // Only the workers may keep the line channel open: if the writer
            // bails early the workers exit, the receiver drops, and the
            // reader's next send unblocks with an error instead of hanging.
            drop(line_rx);
            drop(verdict_tx);

            let mut summary = StreamSummary::default();
            let mut pending: BTreeMap<usize, Verdict> = BTreeMap::new();
            let mut next = 0usize;
            for (seq, verdict) in verdict_rx {
                pending.insert(seq, verdict);
                while let Some(v) = pending.remove(&next) {
                    summary.records += 1;
                    if v.label == VerdictLabel::Error {
                        summary.errors += 1;
                    }
                    let line = if opts.include_timing {
                        v.timed_json()
                    } else {
                        v.stable_json()
                    };
                    writeln!(output, "{line}")?;
                    next += 1;
                }
            }
            output.flush()?;
            Ok(summary)
        })?;

        if let Some(e) = read_error.into_inner().unwrap() {
            return Err(e);
        }
        Ok(summary)
    }

    /// Serves the classify stream over a local Unix socket. Each connection
    /// is a JSON-lines request stream answered by a verdict stream with the
    /// same ordering guarantees as [`Pipeline::classify_stream`].
    /// `max_connections` limits how many connections to serve before
    /// returning (useful for tests); `None` serves forever.
    pub fn serve_unix(
        &self,
        socket_path: &Path,
        opts: &StreamOptions,
        max_connections: Option<usize>,
    ) -> io::Result<()> {
        // Replace a stale socket file from a previous run.
        if socket_path.exists() {
            std::fs::remove_file(socket_path)?;
        }
        let listener = UnixListener::bind(socket_path)?;
        for (served, conn) in listener.incoming().enumerate() {
            let conn = conn?;
            let reader = BufReader::new(conn.try_clone()?);
            // A client hanging up mid-stream only ends that connection.
            let _ = self.classify_stream(reader, conn, opts);
            if max_connections.is_some_and(|max| served + 1 >= max) {
                break;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifiers::{ClassifierKind, ClassifierModel, TrainConfig};
    use crate::features::{Scaler, ScalerMode, FEATURE_COUNT};
    use crate::geo::GeoRange;
    use crate::scan::ScanHostRecord;
    use std::io::Cursor;
    use std::net::Ipv4Addr;

    /// Fixture world: 10.0.<h>.x hosts are "stable hosting" (all scanned,
    /// one port, one AS/country); 172.16.<h>.x are "residential churn"
    /// (39/64 scanned, several ports, per-/24 AS and country).
    fn fixture_stores() -> (ScanStore, GeoStore) {
        let mut hosts = Vec::new();
        for h in 0..8u32 {
            for x in 0..64u32 {
                hosts.push(ScanHostRecord {
                    ip: Ipv4Addr::from((10 << 24) + (h << 8) + x),
                    open_ports: [443u16].into_iter().collect(),
                });
            }
        }
        for h in 0..8u32 {
            for x in 0..64u32 {
                // Roughly 60% of churn hosts are visible to the scanner,
                // with a port drawn from a small rotating set.
                if (x * 7 + h) % 8 < 5 {
                    let port = 1000 + ((x + h) % 5) as u16;
                    hosts.push(ScanHostRecord {
                        ip: Ipv4Addr::from((172 << 24) + (16 << 16) + (h << 8) + x),
                        open_ports: [port].into_iter().collect(),
                    });
                }
            }
        }
        let scan = ScanStore::from_records(hosts);

        let mut ranges = Vec::new();
        for h in 0..8u32 {
            ranges.push(GeoRange::new(
                Ipv4Addr::from((10 << 24) + (h << 8)),
                Ipv4Addr::from((10 << 24) + (h << 8) + 255),
                64500,
                "US",
            ));
        }
        let countries = ["US", "DE", "BR", "IN", "RU", "VN", "TR", "UA"];
        for h in 0..8u32 {
            ranges.push(GeoRange::new(
                Ipv4Addr::from((172 << 24) + (16 << 16) + (h << 8)),
                Ipv4Addr::from((172 << 24) + (16 << 16) + (h << 8) + 255),
                65000 + h,
                countries[h as usize],
            ));
        }
        let geo = GeoStore::from_ranges(ranges).unwrap();
        (scan, geo)
    }

    fn legit_obs(i: u32) -> DnsObservation {
        // 6 addresses inside one stable /24.
        let h = i % 8;
        let ips = (0..6u32).map(move |x| Ipv4Addr::from((10 << 24) + (h << 8) + (i + x) % 64));
        DnsObservation::new(format!("cdn{i}.example"), 86_400, ips, Label::Legitimate).unwrap()
    }

    fn flux_obs(i: u32) -> DnsObservation {
        // 8 addresses spread over all churn /24s.
        let ips = (0..8u32).map(move |x| {
            let h = (i + x) % 8;
            Ipv4Addr::from((172 << 24) + (16 << 16) + (h << 8) + (i * 3 + x * 11) % 64)
        });
        DnsObservation::new(format!("flux{i}.example"), 30, ips, Label::FastFlux).unwrap()
    }

    fn fixture_pipeline() -> Pipeline {
        let (scan, geo) = fixture_stores();
        let mut rows: Vec<[f64; FEATURE_COUNT]> = Vec::new();
        let mut labels = Vec::new();
        for i in 0..24u32 {
            for obs in [legit_obs(i), flux_obs(i)] {
                let lookup = scan.lookup(&obs.a_records).unwrap();
                let summary = geo.summarize(&obs.a_records).unwrap();
                rows.push(extract(&obs, lookup, summary).unwrap().to_array());
                labels.push(obs.label.signed().unwrap());
            }
        }
        let scaler = Scaler::fit(&rows, ScalerMode::MinMax).unwrap();
        let scaled: Vec<[f64; FEATURE_COUNT]> = rows.iter().map(|r| scaler.apply(r)).collect();
        let cfg = TrainConfig::default();
        let classifier =
            ClassifierModel::train(ClassifierKind::Svm, &scaled, &labels, &cfg).unwrap();
        let bundle = ModelBundle {
            scaler,
            classifier,
            config: cfg,
        };
        Pipeline::new(scan, geo, bundle)
    }

    #[test]
    fn classifies_both_worlds_correctly() {
        let pipeline = fixture_pipeline();
        // Held-out indices beyond the training range.
        let legit = pipeline.classify_observation(&legit_obs(31));
        assert_eq!(legit.label, VerdictLabel::Legitimate);
        assert!(legit.decision_value.unwrap() > 0.0);
        assert!(legit.latency_ms.unwrap() > 0.0);
        assert_eq!(legit.feature_vector.unwrap().f5_ip_ratio, 1.0);

        let flux = pipeline.classify_observation(&flux_obs(29));
        assert_eq!(flux.label, VerdictLabel::FastFlux);
        assert!(flux.decision_value.unwrap() <= 0.0);
        assert!(flux.feature_vector.unwrap().f2_regions >= 4);
    }

    #[test]
    fn gate_rejects_small_responses_without_running_the_model() {
        let pipeline = fixture_pipeline();
        let obs = DnsObservation::new(
            "tiny.example",
            60,
            [Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2)],
            Label::Unknown,
        )
        .unwrap();
        let verdict = pipeline.classify_observation(&obs);
        assert_eq!(verdict.label, VerdictLabel::NotSuspicious);
        assert_eq!(verdict.decision_value, None);
        assert_eq!(verdict.feature_vector, None);
        assert_eq!(verdict.domain, "tiny.example");

        // Lowering the gate lets the same record through to the model.
        let lenient = fixture_pipeline().with_gate_threshold(2);
        let verdict = lenient.classify_observation(&obs);
        assert_ne!(verdict.label, VerdictLabel::NotSuspicious);
        assert!(verdict.decision_value.is_some());
    }

    #[test]
    fn malformed_lines_become_error_verdicts_and_stream_continues() {
        let pipeline = fixture_pipeline();
        let input = format!(
            "{}\nnot json\n{}\n",
            crate::dns::to_json_record(&legit_obs(40)),
            crate::dns::to_json_record(&flux_obs(41)),
        );
        let mut out = Vec::new();
        let summary = pipeline
            .classify_stream(
                Cursor::new(input),
                &mut out,
                &StreamOptions {
                    workers: 2,
                    include_timing: false,
                },
            )
            .unwrap();
        assert_eq!(summary.records, 3);
        assert_eq!(summary.errors, 1);
        let lines: Vec<Verdict> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0].label, VerdictLabel::Legitimate);
        assert_eq!(lines[1].label, VerdictLabel::Error);
        assert!(lines[1].error.as_deref().unwrap().contains("malformed"));
        assert_eq!(lines[2].label, VerdictLabel::FastFlux);
    }

    #[test]
    fn stream_output_is_order_preserving_and_pool_size_invariant() {
        let pipeline = fixture_pipeline();
        let mut input = String::new();
        for i in 0..50u32 {
            let obs = if i % 2 == 0 {
                legit_obs(i)
            } else {
                flux_obs(i)
            };
            input.push_str(&crate::dns::to_json_record(&obs));
            input.push('\n');
        }
        let run = |workers: usize| {
            let mut out = Vec::new();
            pipeline
                .classify_stream(
                    Cursor::new(input.as_str()),
                    &mut out,
                    &StreamOptions {
                        workers,
                        include_timing: false,
                    },
                )
                .unwrap();
            String::from_utf8(out).unwrap()
        };
        let serial = run(1);
        assert_eq!(serial, run(4));
        assert_eq!(serial, run(13));
        // Order check: domains come back in input order.
        for (i, line) in serial.lines().enumerate() {
            let v: Verdict = serde_json::from_str(line).unwrap();
            let expected = if i % 2 == 0 {
                format!("cdn{i}.example")
            } else {
                format!("flux{i}.example")
            };
            assert_eq!(v.domain, expected);
        }
    }

    #[test]
    fn stable_json_strips_latency_and_timed_json_keeps_it() {
        let pipeline = fixture_pipeline();
        let verdict = pipeline.classify_observation(&legit_obs(3));
        assert!(!verdict.stable_json().contains("latency_ms"));
        assert!(verdict.timed_json().contains("latency_ms"));
        // Round-trip through the stable form drops only the timing field.
        let parsed: Verdict = serde_json::from_str(&verdict.stable_json()).unwrap();
        assert_eq!(parsed.decision_value, verdict.decision_value);
        assert_eq!(parsed.latency_ms, None);
    }

    #[test]
    fn serve_unix_matches_batch_output() {
        let pipeline = std::sync::Arc::new(fixture_pipeline());
        let dir = tempfile::tempdir().unwrap();
        let socket = dir.path().join("fluxgate.sock");

        let mut input = String::new();
        for i in 0..10u32 {
            input.push_str(&crate::dns::to_json_record(&flux_obs(i)));
            input.push('\n');
        }
        let mut batch_out = Vec::new();
        pipeline
            .classify_stream(
                Cursor::new(input.as_str()),
                &mut batch_out,
                &StreamOptions {
                    workers: 3,
                    include_timing: false,
                },
            )
            .unwrap();

        let server = {
            let pipeline = std::sync::Arc::clone(&pipeline);
            let socket = socket.clone();
            std::thread::spawn(move || {
                pipeline
                    .serve_unix(
                        &socket,
                        &StreamOptions {
                            workers: 3,
                            include_timing: false,
                        },
                        Some(1),
                    )
                    .unwrap();
            })
        };
        // Wait for the socket to appear.
        for _ in 0..200 {
            if socket.exists() {
                break;
            }
            std::thread::sleep(std::time::Duration::from_millis(5));
        }
        let mut conn = std::os::unix::net::UnixStream::connect(&socket).unwrap();
        conn.write_all(input.as_bytes()).unwrap();
        conn.shutdown(std::net::Shutdown::Write).unwrap();
        let mut served = Vec::new();
        io::Read::read_to_end(&mut conn, &mut served).unwrap();
        server.join().unwrap();

        assert_eq!(batch_out, served);
    }

    #[test]
    fn worker_threads_honors_the_env_var() {
        // Serialize against any other env access by running set/unset here.
        std::env::set_var("FLUXGATE_THREADS", "3");
        assert_eq!(worker_threads(), 3);
        std::env::set_var("FLUXGATE_THREADS", "0");
        assert!(worker_threads() >= 1);
        std::env::set_var("FLUXGATE_THREADS", "not a number");
        assert!(worker_threads() >= 1);
        std::env::remove_var("FLUXGATE_THREADS");
        assert!(worker_threads() >= 1);
    }

    #[test]
    fn batch_helper_matches_single_classification() {
        let pipeline = fixture_pipeline();
        let observations = vec![legit_obs(7), flux_obs(8)];
        let batch = pipeline.classify_batch(&observations);
        assert_eq!(batch.len(), 2);
        assert_eq!(
            batch[0].stable_json(),
            pipeline
                .classify_observation(&observations[0])
                .stable_json()
        );
        assert_eq!(
            batch[1].stable_json(),
            pipeline
                .classify_observation(&observations[1])
                .stable_json()
        );
    }
}
