//! IPv4-to-(ASN, country) lookup over a locally ingested range database.
//! Feeds the Regions, ASN-ratio, and RegionalSpread features.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::net::Ipv4Addr;
use std::path::Path;

use thiserror::Error;

use crate::io_util::{open_maybe_gzip, IngestMode, IngestStats};
use crate::scan::QueryError;

/// One inclusive address range and its routing origin. `asn == 0` or a
/// missing country mark an unrouted/unknown range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeoRange {
    pub start: u32,
    pub end: u32,
    pub asn: u32,
    pub country: Option<[u8; 2]>,
}

impl GeoRange {
    pub fn new(start: Ipv4Addr, end: Ipv4Addr, asn: u32, country: &str) -> GeoRange {
        GeoRange {
            start: start.into(),
            end: end.into(),
            asn,
            country: parse_country(country),
        }
    }

    pub fn country_str(&self) -> &str {
        match &self.country {
            Some(c) => std::str::from_utf8(c).unwrap_or("None"),
            None => "None",
        }
    }

    fn covers(&self, ip: u32) -> bool {
        self.start <= ip && ip <= self.end
    }

    /// Unrouted or otherwise unattributable ranges don't locate anything.
    fn is_known(&self) -> bool {
        self.asn != 0 && self.country.is_some()
    }
}

fn parse_country(s: &str) -> Option<[u8; 2]> {
    let b = s.as_bytes();
    if b.len() == 2 && b.iter().all(|c| c.is_ascii_alphabetic()) {
        Some([b[0].to_ascii_uppercase(), b[1].to_ascii_uppercase()])
    } else {
        None
    }
}

/// Location answer for a single IP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeoLocation {
    pub asn: u32,
    pub country: [u8; 2],
}

impl GeoLocation {
    pub fn country_str(&self) -> &str {
        std::str::from_utf8(&self.country).unwrap_or("??")
    }
}

/// Distinct-count summary over one batch of queried IPs. Counts are taken
/// over located IPs only; the rest are tallied in `unknown`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeoSummary {
    pub queried: usize,
    pub distinct_asns: usize,
    pub distinct_countries: usize,
    pub unknown: usize,
}

#[derive(Debug, Error)]
pub enum GeoIngestError {
    #[error("malformed range line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("overlapping ranges: [{0}] and [{1}]")]
    OverlappingRanges(String, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Immutable sorted range store; point lookups by binary search.
#[derive(Debug, Clone, Default)]
pub struct GeoStore {
    ranges: Vec<GeoRange>,
}

fn parse_tsv_line(line: &str) -> Result<GeoRange, String> {
    let mut fields = line.split('\t');
    let start: Ipv4Addr = fields
        .next()
        .ok_or("missing range_start")?
        .parse()
        .map_err(|_| "invalid range_start".to_string())?;
    let end: Ipv4Addr = fields
        .next()
        .ok_or("missing range_end")?
        .parse()
        .map_err(|_| "invalid range_end".to_string())?;
    let asn: u32 = fields
        .next()
        .ok_or("missing AS number")?
        .parse()
        .map_err(|_| "invalid AS number".to_string())?;
    let country = fields.next().ok_or("missing country code")?;
    // Fifth column (AS description) is unused but must be present.
    if fields.next().is_none() {
        return Err("missing AS description".to_string());
    }
    if u32::from(start) > u32::from(end) {
        return Err(format!("range start {start} above end {end}"));
    }
    Ok(GeoRange::new(start, end, asn, country))
}

fn range_repr(r: &GeoRange) -> String {
    format!(
        "{}-{} AS{}",
        Ipv4Addr::from(r.start),
        Ipv4Addr::from(r.end),
        r.asn
    )
}

impl GeoStore {
    /// Builds a store from TSV lines (`start<TAB>end<TAB>asn<TAB>country<TAB>description`).
    /// Ranges may arrive unsorted; overlapping ranges are always rejected.
    pub fn ingest<R: BufRead>(
        reader: R,
        mode: IngestMode,
    ) -> Result<(GeoStore, IngestStats), GeoIngestError> {
        let mut ranges = Vec::new();
        let mut stats = IngestStats::default();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            stats.lines_read += 1;
            match parse_tsv_line(&line) {
                Ok(range) => ranges.push(range),
                Err(reason) => {
                    if mode == IngestMode::Strict {
                        return Err(GeoIngestError::MalformedLine {
                            line: line_no,
                            reason,
                        });
                    }
                    stats.malformed_lines.push(line_no);
                }
            }
        }
        let store = Self::from_ranges(ranges)?;
        stats.records_loaded = store.len();
        Ok((store, stats))
    }

    /// Ingests a TSV file, decompressing `.gz` transparently.
    pub fn ingest_path(
        path: &Path,
        mode: IngestMode,
    ) -> Result<(GeoStore, IngestStats), GeoIngestError> {
        Self::ingest(open_maybe_gzip(path)?, mode)
    }

    /// Sorts ranges by start and rejects any overlap.
    pub fn from_ranges(mut ranges: Vec<GeoRange>) -> Result<GeoStore, GeoIngestError> {
        ranges.sort_by_key(|r| (r.start, r.end));
        for pair in ranges.windows(2) {
            if pair[1].start <= pair[0].end {
                return Err(GeoIngestError::OverlappingRanges(
                    range_repr(&pair[0]),
                    range_repr(&pair[1]),
                ));
            }
        }
        Ok(GeoStore { ranges })
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn ranges(&self) -> &[GeoRange] {
        &self.ranges
    }

    /// Locates an IP in the unique covering range, if one exists and is
    /// attributable (known ASN and country). Range ends are inclusive.
    pub fn locate(&self, ip: Ipv4Addr) -> Option<GeoLocation> {
        let ip = u32::from(ip);
        // Index of the first range starting after ip; the candidate cover
        // is the one just before it.
        let idx = self.ranges.partition_point(|r| r.start <= ip);
        let range = self.ranges[..idx].last()?;
        if range.covers(ip) && range.is_known() {
            Some(GeoLocation {
                asn: range.asn,
                country: range.country.expect("known range has country"),
            })
        } else {
            None
        }
    }

    /// Distinct ASN/country counts over the located IPs of a query batch.
    pub fn summarize(&self, ips: &[Ipv4Addr]) -> Result<GeoSummary, QueryError> {
        if ips.is_empty() {
            return Err(QueryError::EmptyQuery);
        }
        let unique: BTreeSet<u32> = ips.iter().map(|&ip| u32::from(ip)).collect();
        let mut asns = BTreeSet::new();
        let mut countries = BTreeSet::new();
        let mut unknown = 0usize;
        for ip in unique {
            match self.locate(Ipv4Addr::from(ip)) {
                Some(loc) => {
                    asns.insert(loc.asn);
                    countries.insert(loc.country);
                }
                None => unknown += 1,
            }
        }
        Ok(GeoSummary {
            queried: ips.len(),
            distinct_asns: asns.len(),
            distinct_countries: countries.len(),
            unknown,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn store_from(tsv: &str) -> GeoStore {
        GeoStore::ingest(Cursor::new(tsv), IngestMode::Strict)
            .unwrap()
            .0
    }

    #[test]
    fn disjoint_ranges_answer_point_queries() {
        let store = store_from(
            "10.0.0.0\t10.0.0.255\t64500\tDE\tEXAMPLE-AS\n\
             192.168.0.0\t192.168.255.255\t64501\tUS\tOTHER-AS\n",
        );
        assert_eq!(
            store.locate(ip("10.0.0.7")),
            Some(GeoLocation {
                asn: 64500,
                country: *b"DE"
            })
        );
        assert_eq!(store.locate(ip("192.168.3.4")).unwrap().asn, 64501);
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let err = GeoStore::ingest(
            Cursor::new(
                "10.0.0.0\t10.0.0.255\t64500\tDE\tA\n\
                 10.0.0.128\t10.0.1.0\t64501\tUS\tB\n",
            ),
            IngestMode::Lenient,
        )
        .unwrap_err();
        assert!(matches!(err, GeoIngestError::OverlappingRanges(_, _)));
    }

    #[test]
    fn locate_misses_outside_all_ranges() {
        let store = store_from("10.0.0.0\t10.0.0.255\t64500\tDE\tA\n");
        assert_eq!(store.locate(ip("11.0.0.1")), None);
        assert_eq!(store.locate(ip("9.255.255.255")), None);
    }

    #[test]
    fn range_end_is_inclusive() {
        let store = store_from("10.0.0.0\t10.0.0.255\t64500\tDE\tA\n");
        assert!(store.locate(ip("10.0.0.255")).is_some());
        assert!(store.locate(ip("10.0.0.0")).is_some());
        assert!(store.locate(ip("10.0.1.0")).is_none());
    }

    #[test]
    fn unrouted_markers_are_unlocatable() {
        let store = store_from(
            "10.0.0.0\t10.0.0.255\t0\tDE\tUNROUTED\n\
             10.0.1.0\t10.0.1.255\t64500\tNone\tNO-COUNTRY\n",
        );
        assert_eq!(store.locate(ip("10.0.0.1")), None);
        assert_eq!(store.locate(ip("10.0.1.1")), None);
    }

    #[test]
    fn malformed_lines_skip_or_abort_by_mode() {
        let tsv = "10.0.0.0\t10.0.0.255\t64500\tDE\tA\n\
                   not a tsv line\n\
                   10.0.2.0\t10.0.1.0\t64500\tDE\tBACKWARDS\n\
                   10.0.3.0\t10.0.3.255\t64501\tFR\tB\n";
        let (store, stats) = GeoStore::ingest(Cursor::new(tsv), IngestMode::Lenient).unwrap();
        assert_eq!(store.len(), 2);
        assert_eq!(stats.malformed_lines, vec![2, 3]);
        assert!(GeoStore::ingest(Cursor::new(tsv), IngestMode::Strict).is_err());
    }

    #[test]
    fn summarize_counts_distinct_asns_for_ratio() {
        // 10 IPs spread over 5 distinct ASNs: two consecutive addresses per
        // /24, one /24 per ASN.
        let tsv: String = (0..5)
            .map(|i| {
                format!(
                    "10.0.{i}.0\t10.0.{i}.255\t{}\t{}\tAS-{i}\n",
                    64500 + i,
                    ["DE", "US", "FR", "BR", "JP"][i]
                )
            })
            .collect();
        let store = store_from(&tsv);
        let mut query = Vec::new();
        for i in 0..5u8 {
            query.push(Ipv4Addr::new(10, 0, i, 1));
            query.push(Ipv4Addr::new(10, 0, i, 2));
        }
        let summary = store.summarize(&query).unwrap();
        assert_eq!(summary.queried, 10);
        assert_eq!(summary.distinct_asns, 5);
        assert_eq!(summary.distinct_asns as f64 / summary.queried as f64, 0.5);
        assert_eq!(summary.unknown, 0);
    }

    #[test]
    fn summarize_single_ip_single_range() {
        let store = store_from("10.0.0.0\t10.0.0.255\t64500\tDE\tA\n");
        let summary = store.summarize(&[ip("10.0.0.1")]).unwrap();
        assert_eq!(
            summary,
            GeoSummary {
                queried: 1,
                distinct_asns: 1,
                distinct_countries: 1,
                unknown: 0
            }
        );
    }

    #[test]
    fn summarize_counts_unlocatable_ips_as_unknown() {
        let store = store_from(
            "10.0.0.0\t10.0.0.255\t64500\tDE\tA\n\
             10.0.1.0\t10.0.1.255\t64501\tUS\tB\n",
        );
        let query = vec![
            ip("10.0.0.1"),
            ip("10.0.0.2"),
            ip("10.0.1.1"),
            ip("10.0.1.2"),
            ip("172.16.0.1"),
            ip("172.16.0.2"),
        ];
        let summary = store.summarize(&query).unwrap();
        assert_eq!(summary.queried, 6);
        assert_eq!(summary.unknown, 2);
        assert_eq!(summary.distinct_asns, 2);
        assert_eq!(summary.distinct_countries, 2);
    }

    #[test]
    fn summarize_rejects_empty_query() {
        let store = GeoStore::default();
        assert_eq!(store.summarize(&[]), Err(QueryError::EmptyQuery));
    }
}
