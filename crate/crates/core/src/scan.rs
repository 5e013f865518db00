//! Local snapshot of internet-wide scan results, keyed by IPv4 address.
//! Answers the two response-level questions behind the novel features:
//! how many of a response's IPs the scan saw at all (IP ratio), and how
//! many distinct ports are open across the ones it saw.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::net::Ipv4Addr;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::io_util::{open_maybe_gzip, IngestMode, IngestStats};

/// One scanned host: its address and the open ports observed on it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanHostRecord {
    pub ip: Ipv4Addr,
    pub open_ports: BTreeSet<u16>,
}

/// Aggregate answer for one batch of queried IPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanLookupResult {
    /// IPs submitted in the query.
    pub queried: usize,
    /// IPs present in the snapshot.
    pub found: usize,
    /// Distinct port numbers across all found hosts.
    pub distinct_ports: usize,
}

impl ScanLookupResult {
    /// Fraction of queried IPs the snapshot knows about (feature F5).
    pub fn ip_ratio(&self) -> f64 {
        if self.queried == 0 {
            0.0
        } else {
            self.found as f64 / self.queried as f64
        }
    }
}

#[derive(Debug, Error)]
pub enum ScanIngestError {
    #[error("malformed snapshot line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueryError {
    #[error("empty query: no IPs submitted")]
    EmptyQuery,
}

/// Immutable snapshot store. Built once by ingest, shared read-only.
#[derive(Debug, Clone, Default)]
pub struct ScanStore {
    hosts: HashMap<u32, Box<[u16]>>,
}

#[derive(Deserialize)]
struct RawSnapshotLine {
    ip: String,
    ports: Vec<i64>,
}

fn parse_snapshot_line(line: &str) -> Result<ScanHostRecord, String> {
    let raw: RawSnapshotLine =
        serde_json::from_str(line).map_err(|e| format!("invalid json: {e}"))?;
    let ip: Ipv4Addr = raw
        .ip
        .parse()
        .map_err(|_| format!("invalid IPv4 address {:?}", raw.ip))?;
    let mut open_ports = BTreeSet::new();
    for p in raw.ports {
        if !(1..=65535).contains(&p) {
            return Err(format!("port {p} out of range"));
        }
        open_ports.insert(p as u16);
    }
    Ok(ScanHostRecord { ip, open_ports })
}

impl ScanStore {
    /// Builds a store from a line stream of snapshot records. Duplicate IPs
    /// merge their port sets (union), so sharded snapshot files load the
    /// same regardless of order.
    pub fn ingest<R: BufRead>(
        reader: R,
        mode: IngestMode,
    ) -> Result<(ScanStore, IngestStats), ScanIngestError> {
        let mut hosts: HashMap<u32, BTreeSet<u16>> = HashMap::new();
        let mut stats = IngestStats::default();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            stats.lines_read += 1;
            match parse_snapshot_line(&line) {
                Ok(rec) => {
                    hosts
                        .entry(u32::from(rec.ip))
                        .or_default()
                        .extend(rec.open_ports);
                }
                Err(reason) => {
                    if mode == IngestMode::Strict {
                        return Err(ScanIngestError::MalformedLine {
                            line: line_no,
                            reason,
                        });
                    }
                    stats.malformed_lines.push(line_no);
                }
            }
        }
        stats.records_loaded = hosts.len();
        let hosts = hosts
            .into_iter()
            .map(|(ip, ports)| (ip, ports.into_iter().collect()))
            .collect();
        Ok((ScanStore { hosts }, stats))
    }

    /// Ingests a snapshot file, decompressing `.gz` transparently.
    pub fn ingest_path(
        path: &Path,
        mode: IngestMode,
    ) -> Result<(ScanStore, IngestStats), ScanIngestError> {
        Self::ingest(open_maybe_gzip(path)?, mode)
    }

    /// Builds a store directly from host records (fixture construction).
    pub fn from_records(records: impl IntoIterator<Item = ScanHostRecord>) -> ScanStore {
        let mut hosts: HashMap<u32, BTreeSet<u16>> = HashMap::new();
        for rec in records {
            hosts
                .entry(u32::from(rec.ip))
                .or_default()
                .extend(rec.open_ports);
        }
        ScanStore {
            hosts: hosts
                .into_iter()
                .map(|(ip, ports)| (ip, ports.into_iter().collect()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.hosts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hosts.is_empty()
    }

    pub fn contains(&self, ip: Ipv4Addr) -> bool {
        self.hosts.contains_key(&u32::from(ip))
    }

    /// Counts how many of the queried IPs the snapshot contains and how many
    /// distinct ports are open across those hosts. Duplicate IPs in the query
    /// count once toward `found`; a present host with zero open ports still
    /// counts as found.
    pub fn lookup(&self, ips: &[Ipv4Addr]) -> Result<ScanLookupResult, QueryError> {
        if ips.is_empty() {
            return Err(QueryError::EmptyQuery);
        }
        let unique: BTreeSet<u32> = ips.iter().map(|&ip| u32::from(ip)).collect();
        let mut found = 0usize;
        let mut ports: BTreeSet<u16> = BTreeSet::new();
        for ip in unique {
            if let Some(host_ports) = self.hosts.get(&ip) {
                found += 1;
                ports.extend(host_ports.iter().copied());
            }
        }
        Ok(ScanLookupResult {
            queried: ips.len(),
            found,
            distinct_ports: ports.len(),
        })
    }
}
