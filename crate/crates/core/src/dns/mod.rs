//! DNS response ingestion: parse supported input formats into
//! [`DnsObservation`] values and apply the suspicious-domain gate.

mod wire;

pub use wire::parse_wire_response;

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ground-truth class attached to an observation, when known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Label {
    #[serde(rename = "fastflux")]
    FastFlux,
    #[serde(rename = "legit")]
    Legitimate,
    #[serde(other)]
    #[default]
    Unknown,
}

impl Label {
    /// Signed training label: -1 for fast flux, +1 for legitimate.
    pub fn signed(self) -> Option<i8> {
        match self {
            Label::FastFlux => Some(-1),
            Label::Legitimate => Some(1),
            Label::Unknown => None,
        }
    }

    pub fn from_signed(y: i8) -> Option<Label> {
        match y {
            -1 => Some(Label::FastFlux),
            1 => Some(Label::Legitimate),
            _ => None,
        }
    }
}

/// One parsed DNS response: the queried domain, the reply TTL, and the
/// answer-section A records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsObservation {
    pub domain: String,
    pub ttl: u32,
    pub a_records: Vec<Ipv4Addr>,
    #[serde(default, skip_serializing_if = "is_unknown")]
    pub label: Label,
}

fn is_unknown(label: &Label) -> bool {
    *label == Label::Unknown
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("malformed record: {0}")]
    MalformedRecord(String),
    #[error("response contains no A records")]
    NoARecords,
}

/// Input formats accepted by [`parse_observation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordFormat {
    /// RFC 1035 DNS response message bytes.
    WireFormat,
    /// One JSON object per line: `{"domain", "ttl", "a_records", "label"?}`.
    JsonRecord,
}

impl DnsObservation {
    /// Builds an observation, de-duplicating A records (first occurrence
    /// wins) and validating the invariants: at least one record, non-empty
    /// domain after trimming the trailing dot.
    pub fn new(
        domain: impl Into<String>,
        ttl: u32,
        a_records: impl IntoIterator<Item = Ipv4Addr>,
        label: Label,
    ) -> Result<Self, ParseError> {
        let domain = domain.into();
        if domain.trim_end_matches('.').is_empty() {
            return Err(ParseError::MalformedRecord("empty domain name".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let a_records: Vec<Ipv4Addr> = a_records
            .into_iter()
            .filter(|ip| seen.insert(*ip))
            .collect();
        if a_records.is_empty() {
            return Err(ParseError::NoARecords);
        }
        Ok(DnsObservation {
            domain,
            ttl,
            a_records,
            label,
        })
    }

    /// Domain lowercased with one trailing dot stripped. DNS names are
    /// case-insensitive and the root dot is not part of the name proper.
    pub fn canonical_domain(&self) -> String {
        self.domain
            .strip_suffix('.')
            .unwrap_or(&self.domain)
            .to_ascii_lowercase()
    }

    /// Character count of the canonicalized domain (feature F1).
    pub fn domain_length(&self) -> usize {
        self.canonical_domain().chars().count()
    }
}

#[derive(Deserialize)]
struct RawJsonRecord {
    domain: String,
    ttl: i64,
    a_records: Vec<String>,
    #[serde(default)]
    label: Label,
}

/// Parses one record in the declared format into a [`DnsObservation`].
pub fn parse_observation(input: &[u8], format: RecordFormat) -> Result<DnsObservation, ParseError> {
    match format {
        RecordFormat::WireFormat => parse_wire_response(input),
        RecordFormat::JsonRecord => {
            let text = std::str::from_utf8(input)
                .map_err(|e| ParseError::MalformedRecord(format!("invalid utf-8: {e}")))?;
            parse_json_record(text)
        }
    }
}

/// Parses one JSON-lines record.
pub fn parse_json_record(line: &str) -> Result<DnsObservation, ParseError> {
    let raw: RawJsonRecord = serde_json::from_str(line)
        .map_err(|e| ParseError::MalformedRecord(format!("invalid json record: {e}")))?;
    let ttl = u32::try_from(raw.ttl)
        .map_err(|_| ParseError::MalformedRecord(format!("ttl out of range: {}", raw.ttl)))?;
    let mut records = Vec::with_capacity(raw.a_records.len());
    for s in &raw.a_records {
        let ip: Ipv4Addr = s
            .parse()
            .map_err(|_| ParseError::MalformedRecord(format!("invalid IPv4 address: {s:?}")))?;
        records.push(ip);
    }
    DnsObservation::new(raw.domain, ttl, records, raw.label)
}

/// Serializes an observation to its JSON-lines form (no trailing newline).
pub fn to_json_record(obs: &DnsObservation) -> String {
    serde_json::to_string(obs).expect("observation serializes")
}

/// Suspicious-domain gate: true iff the response carries at least
/// `threshold` A records. The default threshold of 5 matches the
/// filter used to build the legitimate corpus.
pub fn is_suspicious(obs: &DnsObservation, threshold: usize) -> bool {
    obs.a_records.len() >= threshold
}

/// Default gate threshold.
pub const DEFAULT_GATE_THRESHOLD: usize = 5;
