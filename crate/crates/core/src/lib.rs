//! Fast-flux domain detection from a single DNS response message.
//!
//! The crate is organized as a pipeline: parse a DNS response ([`dns`]),
//! look its A records up in two locally pre-loaded databases ([`scan`] for
//! internet-scan snapshots, [`geo`] for IP-to-ASN/country ranges), assemble
//! an 8-dimensional feature vector ([`features`]), and classify it with one
//! of three trainable models ([`classifiers`]). The [`eval`] module provides
//! cross-validation, metrics, and feature importance; [`synth`] generates
//! labeled corpora with matching database fixtures; [`pipeline`] wires
//! everything into batch and streaming classification.

pub mod classifiers;
pub mod dns;
pub mod eval;
pub mod features;
pub mod geo;
pub mod io_util;
pub mod pipeline;
pub mod scan;
pub mod synth;

pub use classifiers::{ClassifierKind, ClassifierModel, ModelBundle, TrainConfig};
pub use dns::{DnsObservation, Label};
pub use features::{FeatureVector, Scaler, ScalerMode, FEATURE_COUNT};
pub use geo::{GeoRange, GeoStore, GeoSummary};
pub use pipeline::{Pipeline, Verdict, VerdictLabel};
pub use scan::{ScanLookupResult, ScanStore};
