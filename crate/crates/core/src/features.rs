//! The 8-dimensional feature vector computed from one DNS response plus the
//! two store lookups, feature scaling, and the labeled CSV dataset format.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dns::{DnsObservation, Label};
use crate::geo::GeoSummary;
use crate::io_util::open_maybe_gzip;
use crate::scan::ScanLookupResult;

pub const FEATURE_COUNT: usize = 8;

/// The classifier input for one domain. Counts are taken from the response
/// and the store lookups; ratios are normalized by the response IP count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    /// Characters in the canonical domain name.
    pub f1_domain_length: u32,
    /// Distinct countries among located response IPs.
    pub f2_regions: u32,
    /// Distinct open ports across response IPs found in the scan snapshot.
    pub f3_ports: u32,
    /// A records in the response.
    pub f4_ip_count: u32,
    /// Fraction of response IPs present in the scan snapshot.
    pub f5_ip_ratio: f64,
    /// Response TTL in seconds.
    pub f6_ttl: u32,
    /// Distinct ASNs per response IP.
    pub f7_asn_ratio: f64,
    /// Distinct countries per response IP.
    pub f8_regional_spread: f64,
}

impl FeatureVector {
    pub fn to_array(self) -> [f64; FEATURE_COUNT] {
        [
            f64::from(self.f1_domain_length),
            f64::from(self.f2_regions),
            f64::from(self.f3_ports),
            f64::from(self.f4_ip_count),
            self.f5_ip_ratio,
            f64::from(self.f6_ttl),
            self.f7_asn_ratio,
            self.f8_regional_spread,
        ]
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error(
        "inconsistent inputs: observation has {ip_count} A records but scan lookup \
         covered {scan_queried} IPs and geo lookup {geo_queried}"
    )]
    InconsistentInputs {
        ip_count: usize,
        scan_queried: usize,
        geo_queried: usize,
    },
}

/// Assembles the feature vector for one observation. The scan and geo
/// results must come from lookups over exactly the observation's A records.
pub fn extract(
    obs: &DnsObservation,
    scan: ScanLookupResult,
    geo: GeoSummary,
) -> Result<FeatureVector, ExtractError> {
    let ip_count = obs.a_records.len();
    if scan.queried != ip_count || geo.queried != ip_count {
        return Err(ExtractError::InconsistentInputs {
            ip_count,
            scan_queried: scan.queried,
            geo_queried: geo.queried,
        });
    }
    let denom = ip_count as f64;
    Ok(FeatureVector {
        f1_domain_length: obs.domain_length() as u32,
        f2_regions: geo.distinct_countries as u32,
        f3_ports: scan.distinct_ports as u32,
        f4_ip_count: ip_count as u32,
        f5_ip_ratio: scan.ip_ratio(),
        f6_ttl: obs.ttl,
        f7_asn_ratio: geo.distinct_asns as f64 / denom,
        f8_regional_spread: geo.distinct_countries as f64 / denom,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScalerMode {
    MinMax,
    ZScore,
}

/// Per-feature statistic: (min, max) for MinMax, (mean, stddev) for ZScore.
/// Constant features are flagged and always scale to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct FeatureStat {
    a: f64,
    b: f64,
    constant: bool,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScaleError {
    #[error("cannot fit a scaler on an empty training set")]
    EmptyTrainingSet,
}

/// Feature scaler fitted on training rows only. Construction goes through
/// [`Scaler::fit`], so an unfitted scaler cannot exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    mode: ScalerMode,
    stats: [FeatureStat; FEATURE_COUNT],
}

impl Scaler {
    pub fn fit(rows: &[[f64; FEATURE_COUNT]], mode: ScalerMode) -> Result<Scaler, ScaleError> {
        if rows.is_empty() {
            return Err(ScaleError::EmptyTrainingSet);
        }
        let n = rows.len() as f64;
        let stats = std::array::from_fn(|j| {
            let col = rows.iter().map(|r| r[j]);
            match mode {
                ScalerMode::MinMax => {
                    let min = col.clone().fold(f64::INFINITY, f64::min);
                    let max = col.fold(f64::NEG_INFINITY, f64::max);
                    FeatureStat {
                        a: min,
                        b: max,
                        constant: min == max,
                    }
                }
                ScalerMode::ZScore => {
                    let mean = col.clone().sum::<f64>() / n;
                    let var = col.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let std = var.sqrt();
                    FeatureStat {
                        a: mean,
                        b: std,
                        constant: std == 0.0,
                    }
                }
            }
        });
        Ok(Scaler { mode, stats })
    }

    pub fn mode(&self) -> ScalerMode {
        self.mode
    }

    /// Scales one row. MinMax output is clamped to [0,1] so inference-time
    /// values outside the training range stay bounded; ZScore is unclamped.
    pub fn apply(&self, row: &[f64; FEATURE_COUNT]) -> [f64; FEATURE_COUNT] {
        std::array::from_fn(|j| {
            let stat = &self.stats[j];
            if stat.constant {
                return 0.0;
            }
            match self.mode {
                ScalerMode::MinMax => ((row[j] - stat.a) / (stat.b - stat.a)).clamp(0.0, 1.0),
                ScalerMode::ZScore => (row[j] - stat.a) / stat.b,
            }
        })
    }

    /// Maps a scaled row back to feature units. Constant features recover
    /// their training-time value.
    pub fn invert(&self, scaled: &[f64; FEATURE_COUNT]) -> [f64; FEATURE_COUNT] {
        std::array::from_fn(|j| {
            let stat = &self.stats[j];
            if stat.constant {
                return stat.a;
            }
            match self.mode {
                ScalerMode::MinMax => stat.a + scaled[j] * (stat.b - stat.a),
                ScalerMode::ZScore => stat.a + scaled[j] * stat.b,
            }
        })
    }
}

pub const CSV_HEADER: &str = "f1,f2,f3,f4,f5,f6,f7,f8,label";

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("bad CSV header: expected `{CSV_HEADER}`, found `{0}`")]
    Header(String),
    #[error("bad CSV row at line {line}: {reason}")]
    Row { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Labeled feature rows; the on-disk form is a 9-column CSV
/// (`f1..f8,label`) with labels in {-1,+1}.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub rows: Vec<[f64; FEATURE_COUNT]>,
    pub labels: Vec<i8>,
}

impl Dataset {
    pub fn push(&mut self, row: [f64; FEATURE_COUNT], label: Label) -> Result<(), CsvError> {
        let signed = label.signed().ok_or_else(|| CsvError::Row {
            line: self.rows.len() + 2,
            reason: "observation has no label".to_string(),
        })?;
        self.rows.push(row);
        self.labels.push(signed);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for (row, label) in self.rows.iter().zip(&self.labels) {
            for v in row {
                write!(w, "{v},")?;
            }
            writeln!(w, "{label:+}")?;
        }
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut file)?;
        file.flush()
    }

    pub fn read_csv<R: BufRead>(reader: R) -> Result<Dataset, CsvError> {
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line?,
            None => return Err(CsvError::Header(String::new())),
        };
        if header.trim_end() != CSV_HEADER {
            return Err(CsvError::Header(header));
        }
        let mut data = Dataset::default();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row_err = |reason: &str| CsvError::Row {
                line: line_no,
                reason: reason.to_string(),
            };
            let fields: Vec<&str> = line.trim_end().split(',').collect();
            if fields.len() != FEATURE_COUNT + 1 {
                return Err(row_err(&format!(
                    "expected {} fields, found {}",
                    FEATURE_COUNT + 1,
                    fields.len()
                )));
            }
            let mut row = [0.0; FEATURE_COUNT];
            for (j, field) in fields[..FEATURE_COUNT].iter().enumerate() {
                let v: f64 = field.parse().map_err(|_| row_err("non-numeric feature"))?;
                if !v.is_finite() {
                    return Err(row_err("non-finite feature"));
                }
                row[j] = v;
            }
            let label: i8 = match fields[FEATURE_COUNT] {
                "-1" => -1,
                "+1" | "1" => 1,
                other => return Err(row_err(&format!("label must be -1 or +1, found {other}"))),
            };
            data.rows.push(row);
            data.labels.push(label);
        }
        Ok(data)
    }

    /// Reads a feature CSV file, decompressing `.gz` transparently.
    pub fn read_csv_path(path: &Path) -> Result<Dataset, CsvError> {
        Self::read_csv(open_maybe_gzip(path)?)
    }
}
