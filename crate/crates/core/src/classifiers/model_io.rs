//! Model files: magic bytes, a format version, a model kind tag, the
//! parameters as canonical JSON, and a trailing SHA-256 over everything
//! before it. Validation order is magic, version, checksum, then parse, so
//! a version bump is reported as such even though it also breaks the hash.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ClassifierKind, ClassifierModel, TrainConfig};
use crate::features::Scaler;

pub const MODEL_MAGIC: &[u8; 8] = b"FXGMODEL";
pub const MODEL_FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = MODEL_MAGIC.len() + 2 + 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unsupported model format version {found} (this build reads {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
}

/// Everything needed to classify: the scaler fitted on the training set,
/// the trained classifier, and the config that produced it. Keeping the
/// scaler inside the artifact means a model file is self-sufficient —
/// inference can never pair a model with the wrong normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub scaler: Scaler,
    pub classifier: ClassifierModel,
    pub config: TrainConfig,
}

fn kind_tag(kind: ClassifierKind) -> u8 {
    match kind {
        ClassifierKind::Svm => 1,
        ClassifierKind::Mlp => 2,
        ClassifierKind::RbfNet => 3,
    }
}

fn tag_kind(tag: u8) -> Option<ClassifierKind> {
    match tag {
        1 => Some(ClassifierKind::Svm),
        2 => Some(ClassifierKind::Mlp),
        3 => Some(ClassifierKind::RbfNet),
        _ => None,
    }
}

impl ModelBundle {
    pub fn kind(&self) -> ClassifierKind {
        self.classifier.kind()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = serde_json::to_vec(self)
            .expect("model parameters are plain numeric structs and always serialize");
        let mut bytes = Vec::with_capacity(HEADER_LEN + payload.len() + CHECKSUM_LEN);
        bytes.extend_from_slice(MODEL_MAGIC);
        bytes.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
        bytes.push(kind_tag(self.kind()));
        bytes.extend_from_slice(&payload);
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest);
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle, ModelIoError> {
        let corrupt = |reason: &str| ModelIoError::CorruptModel(reason.to_string());
        if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
            return Err(corrupt("file shorter than header and checksum"));
        }
        if &bytes[..MODEL_MAGIC.len()] != MODEL_MAGIC {
            return Err(corrupt("bad magic bytes"));
        }
        let version = u16::from_le_bytes([bytes[8], bytes[9]]);
        if version != MODEL_FORMAT_VERSION {
            return Err(ModelIoError::VersionMismatch {
                found: version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let (body, trailer) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(corrupt("checksum mismatch"));
        }
        let tagged = tag_kind(bytes[10]).ok_or_else(|| corrupt("unknown model kind tag"))?;
        let bundle: ModelBundle = serde_json::from_slice(&body[HEADER_LEN..])
            .map_err(|e| corrupt(&format!("unparseable payload: {e}")))?;
        if bundle.kind() != tagged {
            return Err(corrupt("kind tag disagrees with payload"));
        }
        Ok(bundle)
    }
}

pub fn save_model(bundle: &ModelBundle, path: &Path) -> Result<(), ModelIoError> {
    std::fs::write(path, bundle.to_bytes())?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelBundle, ModelIoError> {
    ModelBundle::from_bytes(&std::fs::read(path)?)
}
