//! Synthetic corpus generation: labeled DNS observations plus a scan
//! snapshot and a geo range database that are mutually consistent, so the
//! whole pipeline can be exercised and trained without real-world data.
//!
//! Each class is a mixture of cohorts. A cohort fixes the sampling ranges
//! for every feature driver: domain length, response size, TTL, scanner
//! visibility (which drives the IP ratio), network-block spread (which
//! drives the ASN ratio and regional spread), country pool, and open-port
//! pool. Address blocks are allocated sequentially so geo ranges never
//! overlap, and only hosts that some observation actually returns are
//! eligible for the snapshot.

use std::collections::BTreeSet;
use std::io::{self, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dns::{to_json_record, DnsObservation, Label};
use crate::features::{extract, Dataset};
use crate::geo::{GeoRange, GeoStore};
use crate::scan::{ScanHostRecord, ScanStore};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
}

/// Inclusive integer range; all synth ranges are at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: u32,
    pub max: u32,
}

impl IntRange {
    pub fn new(min: u32, max: u32) -> IntRange {
        IntRange { min, max }
    }

    fn validate(&self, what: &str) -> Result<(), SynthError> {
        if self.min < 1 || self.min > self.max {
            return Err(SynthError::InvalidDistribution(format!(
                "{what}: need 1 <= min <= max, got {}..={}",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        rng.gen_range(self.min..=self.max)
    }
}

/// Sampling profile for one homogeneous group of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub count: usize,
    /// Canonical domain length in characters.
    pub domain_length: IntRange,
    /// A records per response.
    pub ip_count: IntRange,
    pub ttl: IntRange,
    /// Probability that a returned host appears in the scan snapshot.
    pub scan_presence: f64,
    /// Distinct /24 blocks per record (capped at the record's IP count).
    /// Each block gets its own AS number, so this drives the ASN ratio.
    pub network_blocks: IntRange,
    /// Country pool; every block draws one entry.
    pub countries: Vec<String>,
    /// Open-port pool; every scanned host draws from it.
    pub port_pool: Vec<u16>,
    /// Open ports per scanned host (capped at the pool size).
    pub ports_per_host: IntRange,
}

impl Cohort {
    fn validate(&self, name: &str) -> Result<(), SynthError> {
        self.domain_length
            .validate(&format!("{name}.domain_length"))?;
        self.ip_count.validate(&format!("{name}.ip_count"))?;
        self.ttl.validate(&format!("{name}.ttl"))?;
        self.network_blocks
            .validate(&format!("{name}.network_blocks"))?;
        self.ports_per_host
            .validate(&format!("{name}.ports_per_host"))?;
        if !(0.0..=1.0).contains(&self.scan_presence) {
            return Err(SynthError::InvalidDistribution(format!(
                "{name}.scan_presence: probability {} outside [0, 1]",
                self.scan_presence
            )));
        }
        if self.countries.is_empty() {
            return Err(SynthError::InvalidDistribution(format!(
                "{name}.countries: pool is empty"
            )));
        }
        for c in &self.countries {
            let ok = c.len() == 2 && c.bytes().all(|b| b.is_ascii_alphabetic());
            if !ok {
                return Err(SynthError::InvalidDistribution(format!(
                    "{name}.countries: {c:?} is not a two-letter code"
                )));
            }
        }
        if self.port_pool.is_empty() {
            return Err(SynthError::InvalidDistribution(format!(
                "{name}.port_pool: pool is empty"
            )));
        }
        if self.port_pool.contains(&0) {
            return Err(SynthError::InvalidDistribution(format!(
                "{name}.port_pool: port 0 is not a valid open port"
            )));
        }
        Ok(())
    }
}

/// Full corpus recipe: a seed plus cohort mixtures for both classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub flux: Vec<Cohort>,
    pub legit: Vec<Cohort>,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (i, c) in self.flux.iter().enumerate() {
            c.validate(&format!("flux[{i}]"))?;
        }
        for (i, c) in self.legit.iter().enumerate() {
            c.validate(&format!("legit[{i}]"))?;
        }
        Ok(())
    }

    /// Reference corpus: 5062 fast-flux and 3087 legitimate records.
    ///
    /// Each class is mostly a well-separated "main" cohort, plus a "hard"
    /// cohort that blends several attributes toward the other class (kept
    /// separable through the remaining attributes), plus a tiny cohort
    /// drawn entirely from the other class's profile so the task has an
    /// irreducible error floor and the classifier ranking is meaningful.
    pub fn default_corpus() -> SynthConfig {
        let flux_main = Cohort {
            count: 4859,
            domain_length: IntRange::new(13, 32),
            ip_count: IntRange::new(8, 20),
            ttl: IntRange::new(30, 900),
            scan_presence: 0.70,
            network_blocks: IntRange::new(4, 16),
            countries: [
                "RU", "UA", "TR", "VN", "BR", "IN", "CN", "ID", "PK", "EG", "NG", "TH",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            port_pool: (1024..1064).collect(),
            ports_per_host: IntRange::new(1, 3),
        };
        let flux_hard = Cohort {
            count: 185,
            domain_length: IntRange::new(10, 20),
            ip_count: IntRange::new(5, 9),
            ttl: IntRange::new(600, 7200),
            scan_presence: 0.92,
            network_blocks: IntRange::new(2, 4),
            countries: ["US", "DE", "NL"].iter().map(|s| s.to_string()).collect(),
            port_pool: (1024..1064).collect(),
            ports_per_host: IntRange::new(1, 2),
        };
        let legit_main = Cohort {
            count: 2941,
            domain_length: IntRange::new(6, 18),
            ip_count: IntRange::new(5, 12),
            ttl: IntRange::new(3600, 86_400),
            scan_presence: 0.98,
            network_blocks: IntRange::new(1, 2),
            countries: ["US", "DE"].iter().map(|s| s.to_string()).collect(),
            port_pool: vec![80, 443],
            ports_per_host: IntRange::new(1, 2),
        };
        let legit_hard = Cohort {
            count: 124,
            domain_length: IntRange::new(8, 22),
            ip_count: IntRange::new(6, 14),
            ttl: IntRange::new(300, 3600),
            scan_presence: 0.82,
            network_blocks: IntRange::new(3, 6),
            countries: ["US", "DE", "FR", "GB", "JP"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            port_pool: vec![80, 443, 8080],
            ports_per_host: IntRange::new(1, 2),
        };
        // Irreducible overlap: flux drawn from the legitimate profile and
        // vice versa.
        let flux_ambiguous = Cohort {
            count: 18,
            ..legit_main.clone()
        };
        let legit_ambiguous = Cohort {
            count: 22,
            ..flux_main.clone()
        };
        SynthConfig {
            seed: 42,
            flux: vec![flux_main, flux_hard, flux_ambiguous],
            legit: vec![legit_main, legit_hard, legit_ambiguous],
        }
    }
}

/// Generated corpus: observations plus the two store fixtures they are
/// consistent with.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub observations: Vec<DnsObservation>,
    pub snapshot: Vec<ScanHostRecord>,
    pub geo: Vec<GeoRange>,
}

/// Files written by [`SynthCorpus::write_to_dir`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub observations: PathBuf,
    pub snapshot: PathBuf,
    pub geo: PathBuf,
}

fn base36(mut n: usize) -> String {
    const DIGITS: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyz";
    let mut out = Vec::new();
    loop {
        out.push(DIGITS[n % 36]);
        n /= 36;
        if n == 0 {
            break;
        }
    }
    out.reverse();
    String::from_utf8(out).expect("base36 digits are ascii")
}

/// Builds a synthetic name of exactly `length` canonical characters. A
/// base-36 record tag keeps names unique whenever the length allows it.
fn synth_domain(rng: &mut ChaCha8Rng, tag: usize, length: u32) -> String {
    let length = length as usize;
    let tag36 = base36(tag);
    let suffix = ".test";
    let mut name = String::with_capacity(length);
    if length > suffix.len() + tag36.len() {
        name.push_str(&tag36);
        while name.len() < length - suffix.len() {
            name.push(rng.gen_range(b'a'..=b'z') as char);
        }
        name.push_str(suffix);
    } else {
        while name.len() < length {
            name.push(rng.gen_range(b'a'..=b'z') as char);
        }
    }
    name
}

/// Sequential /24 allocator starting at 1.0.0.0; blocks never overlap and
/// each carries a unique AS number.
struct BlockAllocator {
    next: u32,
}

struct BlockInfo {
    base: u32,
    asn: u32,
}

impl BlockAllocator {
    fn new() -> BlockAllocator {
        BlockAllocator { next: 0 }
    }

    fn alloc(&mut self) -> BlockInfo {
        let idx = self.next;
        self.next += 1;
        assert!(idx < 0x7E_0000, "synthetic address space exhausted");
        BlockInfo {
            base: 0x0100_0000 + idx * 256,
            asn: 64_000 + idx,
        }
    }
}

/// Generates the corpus for one config. Deterministic: the same config
/// (including its seed) always yields the identical corpus.
pub fn generate(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut allocator = BlockAllocator::new();
    let mut observations = Vec::new();
    let mut snapshot = Vec::new();
    let mut geo = Vec::new();
    let mut tag = 0usize;

    let class_cohorts = [
        (Label::FastFlux, &config.flux),
        (Label::Legitimate, &config.legit),
    ];
    for (label, cohorts) in class_cohorts {
        for cohort in cohorts.iter() {
            for _ in 0..cohort.count {
                let n = cohort.ip_count.sample(&mut rng) as usize;
                let blocks = (cohort.network_blocks.sample(&mut rng) as usize).min(n);
                let ttl = cohort.ttl.sample(&mut rng);
                let length = cohort.domain_length.sample(&mut rng);
                let domain = synth_domain(&mut rng, tag, length);
                tag += 1;

                let block_infos: Vec<BlockInfo> = (0..blocks).map(|_| allocator.alloc()).collect();
                for info in &block_infos {
                    let country = cohort
                        .countries
                        .choose(&mut rng)
                        .expect("validated non-empty pool");
                    geo.push(GeoRange::new(
                        Ipv4Addr::from(info.base),
                        Ipv4Addr::from(info.base + 255),
                        info.asn,
                        country,
                    ));
                }

                let ips: Vec<Ipv4Addr> = (0..n)
                    .map(|j| {
                        let block = &block_infos[j % blocks];
                        Ipv4Addr::from(block.base + (j / blocks) as u32 + 1)
                    })
                    .collect();
                for &ip in &ips {
                    if rng.gen_bool(cohort.scan_presence) {
                        let k = (cohort.ports_per_host.sample(&mut rng) as usize)
                            .min(cohort.port_pool.len());
                        let open_ports: BTreeSet<u16> = cohort
                            .port_pool
                            .choose_multiple(&mut rng, k)
                            .copied()
                            .collect();
                        snapshot.push(ScanHostRecord { ip, open_ports });
                    }
                }

                observations.push(
                    DnsObservation::new(domain, ttl, ips, label)
                        .expect("synthetic records satisfy the observation invariants"),
                );
            }
        }
    }
    // Interleave the classes so file prefixes are already a mixed sample.
    observations.shuffle(&mut rng);
    Ok(SynthCorpus {
        observations,
        snapshot,
        geo,
    })
}

impl SynthCorpus {
    pub fn scan_store(&self) -> ScanStore {
        ScanStore::from_records(self.snapshot.iter().cloned())
    }

    pub fn geo_store(&self) -> GeoStore {
        GeoStore::from_ranges(self.geo.clone()).expect("sequential block allocation cannot overlap")
    }

    /// Extracts the labeled feature dataset, skipping records below the
    /// suspicious gate.
    pub fn to_dataset(&self, gate_threshold: usize) -> Dataset {
        let scan = self.scan_store();
        let geo = self.geo_store();
        let mut data = Dataset::default();
        for obs in &self.observations {
            let Some(y) = obs.label.signed() else {
                continue;
            };
            if obs.a_records.len() < gate_threshold {
                continue;
            }
            let lookup = scan.lookup(&obs.a_records).expect("records have IPs");
            let summary = geo.summarize(&obs.a_records).expect("records have IPs");
            let fv = extract(obs, lookup, summary).expect("lookups cover exactly the records");
            data.rows.push(fv.to_array());
            data.labels.push(y);
        }
        data
    }

    /// Writes `observations.jsonl`, `snapshot.jsonl`, and `geo.tsv` into
    /// `dir` (created if missing). Byte-deterministic.
    pub fn write_to_dir(&self, dir: &Path) -> io::Result<SynthPaths> {
        std::fs::create_dir_all(dir)?;
        let paths = SynthPaths {
            observations: dir.join("observations.jsonl"),
            snapshot: dir.join("snapshot.jsonl"),
            geo: dir.join("geo.tsv"),
        };

        let mut w = BufWriter::new(std::fs::File::create(&paths.observations)?);
        for obs in &self.observations {
            writeln!(w, "{}", to_json_record(obs))?;
        }
        w.flush()?;

        let mut w = BufWriter::new(std::fs::File::create(&paths.snapshot)?);
        for host in &self.snapshot {
            let ports: Vec<String> = host.open_ports.iter().map(|p| p.to_string()).collect();
            writeln!(
                w,
                "{{\"ip\":\"{}\",\"ports\":[{}]}}",
                host.ip,
                ports.join(",")
            )?;
        }
        w.flush()?;

        let mut w = BufWriter::new(std::fs::File::create(&paths.geo)?);
        for (idx, range) in self.geo.iter().enumerate() {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\tsynthetic block {}",
                Ipv4Addr::from(range.start),
                Ipv4Addr::from(range.end),
                range.asn,
                range.country_str(),
                idx
            )?;
        }
        w.flush()?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io_util::IngestMode;

    fn small_cohort(count: usize, presence: f64) -> Cohort {
        Cohort {
            count,
            domain_length: IntRange::new(10, 20),
            ip_count: IntRange::new(8, 12),
            ttl: IntRange::new(60, 600),
            scan_presence: presence,
            network_blocks: IntRange::new(2, 6),
            countries: vec!["RU".into(), "BR".into(), "VN".into()],
            port_pool: vec![1024, 2048, 4096, 8192],
            ports_per_host: IntRange::new(1, 2),
        }
    }

    fn small_config() -> SynthConfig {
        SynthConfig {
            seed: 7,
            flux: vec![small_cohort(40, 0.7)],
            legit: vec![Cohort {
                countries: vec!["US".into()],
                port_pool: vec![80, 443],
                network_blocks: IntRange::new(1, 2),
                scan_presence: 1.0,
                ..small_cohort(30, 1.0)
            }],
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small_config();
        assert_eq!(generate(&config).unwrap(), generate(&config).unwrap());
    }

    #[test]
    fn corpus_counts_match_the_config() {
        let corpus = generate(&small_config()).unwrap();
        assert_eq!(corpus.observations.len(), 70);
        let flux = corpus
            .observations
            .iter()
            .filter(|o| o.label == Label::FastFlux)
            .count();
        assert_eq!(flux, 40);
    }

    #[test]
    fn snapshot_and_geo_are_consistent_with_observations() {
        let corpus = generate(&small_config()).unwrap();
        let all_ips: BTreeSet<Ipv4Addr> = corpus
            .observations
            .iter()
            .flat_map(|o| o.a_records.iter().copied())
            .collect();
        // Every snapshot host was actually returned by some observation.
        for host in &corpus.snapshot {
            assert!(
                all_ips.contains(&host.ip),
                "orphan snapshot host {}",
                host.ip
            );
        }
        // Every returned IP is geo-locatable.
        let geo = corpus.geo_store();
        for ip in all_ips {
            assert!(geo.locate(ip).is_some(), "unlocatable IP {ip}");
        }
    }

    #[test]
    fn empirical_presence_tracks_the_configured_rate() {
        let config = SynthConfig {
            seed: 3,
            flux: vec![small_cohort(1000, 0.7)],
            legit: vec![Cohort {
                scan_presence: 1.0,
                ..small_cohort(50, 1.0)
            }],
        };
        let corpus = generate(&config).unwrap();
        let data = corpus.to_dataset(5);
        let ratios: Vec<f64> = data
            .rows
            .iter()
            .zip(&data.labels)
            .filter(|(_, &y)| y == -1)
            .map(|(r, _)| r[4])
            .collect();
        assert_eq!(ratios.len(), 1000);
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(
            (mean - 0.7).abs() <= 0.05,
            "observed flux IP ratio {mean}, expected 0.7 ± 0.05"
        );
        // The fully scanned class sits at ratio 1 exactly.
        let legit_min = data
            .rows
            .iter()
            .zip(&data.labels)
            .filter(|(_, &y)| y == 1)
            .map(|(r, _)| r[4])
            .fold(f64::INFINITY, f64::min);
        assert_eq!(legit_min, 1.0);
    }

    #[test]
    fn domains_have_the_sampled_length_and_unique_tags() {
        let corpus = generate(&small_config()).unwrap();
        let mut seen = BTreeSet::new();
        for obs in &corpus.observations {
            let len = obs.canonical_domain().chars().count() as u32;
            assert!((10..=20).contains(&len), "length {len} outside 10..=20");
            assert!(seen.insert(obs.domain.clone()), "duplicate {}", obs.domain);
        }
    }

    #[test]
    fn files_round_trip_through_the_ingest_paths() {
        let corpus = generate(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = corpus.write_to_dir(dir.path()).unwrap();

        let (scan, scan_stats) =
            ScanStore::ingest_path(&paths.snapshot, IngestMode::Strict).unwrap();
        assert_eq!(scan_stats.malformed_lines.len(), 0);
        let (geo, _) = GeoStore::ingest_path(&paths.geo, IngestMode::Strict).unwrap();
        assert_eq!(geo.len(), corpus.geo.len());

        let text = std::fs::read_to_string(&paths.observations).unwrap();
        let parsed: Vec<DnsObservation> = text
            .lines()
            .map(|l| crate::dns::parse_json_record(l).unwrap())
            .collect();
        assert_eq!(parsed, corpus.observations);

        // Lookups through the re-ingested stores match the in-memory ones.
        let mem_scan = corpus.scan_store();
        let mem_geo = corpus.geo_store();
        for obs in parsed.iter().take(10) {
            assert_eq!(
                scan.lookup(&obs.a_records).unwrap(),
                mem_scan.lookup(&obs.a_records).unwrap()
            );
            assert_eq!(
                geo.summarize(&obs.a_records).unwrap(),
                mem_geo.summarize(&obs.a_records).unwrap()
            );
        }
    }

    #[test]
    fn written_files_are_byte_identical_across_runs() {
        let corpus = generate(&small_config()).unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let a = corpus.write_to_dir(dir_a.path()).unwrap();
        let b = corpus.write_to_dir(dir_b.path()).unwrap();
        for (pa, pb) in [
            (&a.observations, &b.observations),
            (&a.snapshot, &b.snapshot),
            (&a.geo, &b.geo),
        ] {
            assert_eq!(std::fs::read(pa).unwrap(), std::fs::read(pb).unwrap());
        }
    }

    #[test]
    fn gate_threshold_filters_small_responses_out_of_the_dataset() {
        let config = SynthConfig {
            seed: 1,
            flux: vec![Cohort {
                ip_count: IntRange::new(2, 3),
                network_blocks: IntRange::new(1, 2),
                ..small_cohort(10, 0.7)
            }],
            legit: vec![small_cohort(10, 1.0)],
        };
        let corpus = generate(&config).unwrap();
        let data = corpus.to_dataset(5);
        // Only the legitimate cohort (8..=12 records each) survives.
        assert_eq!(data.len(), 10);
        assert!(data.labels.iter().all(|&y| y == 1));
        let ungated = corpus.to_dataset(0);
        assert_eq!(ungated.len(), 20);
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        let base = small_config();

        let mut c = base.clone();
        c.flux[0].scan_presence = 1.2;
        assert!(matches!(
            generate(&c).unwrap_err(),
            SynthError::InvalidDistribution(msg) if msg.contains("scan_presence")
        ));

        let mut c = base.clone();
        c.flux[0].ip_count = IntRange::new(9, 3);
        assert!(matches!(
            generate(&c).unwrap_err(),
            SynthError::InvalidDistribution(msg) if msg.contains("ip_count")
        ));

        let mut c = base.clone();
        c.legit[0].countries = vec!["USA".into()];
        assert!(matches!(
            generate(&c).unwrap_err(),
            SynthError::InvalidDistribution(msg) if msg.contains("two-letter")
        ));

        let mut c = base.clone();
        c.legit[0].port_pool.clear();
        assert!(matches!(
            generate(&c).unwrap_err(),
            SynthError::InvalidDistribution(msg) if msg.contains("port_pool")
        ));

        let mut c = base.clone();
        c.flux[0].ports_per_host = IntRange::new(0, 2);
        assert!(matches!(
            generate(&c).unwrap_err(),
            SynthError::InvalidDistribution(msg) if msg.contains("ports_per_host")
        ));
    }

    #[test]
    fn default_corpus_has_the_reference_shape() {
        let config = SynthConfig::default_corpus();
        config.validate().unwrap();
        assert_eq!(config.flux.iter().map(|c| c.count).sum::<usize>(), 5062);
        assert_eq!(config.legit.iter().map(|c| c.count).sum::<usize>(), 3087);
        // Every default cohort passes the suspicious gate, so the full
        // corpus is usable for training.
        for c in config.flux.iter().chain(&config.legit) {
            assert!(c.ip_count.min >= 5);
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let config = SynthConfig::default_corpus();
        let json = serde_json::to_string_pretty(&config).unwrap();
        let parsed: SynthConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, config);
    }
}
