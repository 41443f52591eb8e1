//! Single-file model checkpoints.
//!
//! Layout: the 8-byte magic `JITDPCK1` followed by a bincode payload holding
//! the scalar width tag, encoder spec, head config, head parameters, any
//! trainable backbone weights, and the hash of the training config.
//! Pre-trained backbones are frozen, so only their spec is stored and the
//! weights are resolved from the backbone cache on load.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encode::{
    Backbone, BackboneCache, BackboneLoader, BackboneName, BackboneWeights, EmbeddingTable,
    EncodeError, EncoderSpec, ToyEncoder,
};
use crate::head::{HeadConfig, HeadError, HeadParams};
use crate::model::JitModel;
use crate::Scalar;

const MAGIC: &[u8; 8] = b"JITDPCK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {}: not a checkpoint file", path.display())]
    BadMagic { path: PathBuf },
    #[error("checkpoint {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },
    #[error("checkpoint stores {stored} parameters, requested {requested}")]
    ScalarMismatch { stored: String, requested: &'static str },
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

#[derive(Serialize, Deserialize)]
enum StoredBackbone<F> {
    Toy,
    Scratch(EmbeddingTable<F>),
    Pretrained,
}

#[derive(Serialize, Deserialize)]
struct Payload<F> {
    scalar: String,
    encoder: EncoderSpec,
    head_config: HeadConfig,
    head: HeadParams<F>,
    backbone: StoredBackbone<F>,
    train_config_hash: String,
}

/// Serialized checkpoint bytes.
pub fn checkpoint_bytes<F: Scalar>(model: &JitModel<F>, train_config_hash: &str) -> Vec<u8> {
    let backbone = match &model.backbone.weights {
        BackboneWeights::Toy(_) => StoredBackbone::Toy,
        BackboneWeights::Scratch(t) => StoredBackbone::Scratch(t.clone()),
        BackboneWeights::Pretrained(_) => StoredBackbone::Pretrained,
    };
    let payload = Payload {
        scalar: F::TYPE_TAG.to_string(),
        encoder: model.backbone.spec.clone(),
        head_config: model.config,
        head: model.head.clone(),
        backbone,
        train_config_hash: train_config_hash.to_string(),
    };
    let mut out = MAGIC.to_vec();
    bincode::serialize_into(&mut out, &payload).expect("in-memory serialization cannot fail");
    out
}

/// Writes the checkpoint and returns its size in bytes.
pub fn save_checkpoint<F: Scalar>(
    model: &JitModel<F>,
    train_config_hash: &str,
    path: impl AsRef<Path>,
) -> Result<u64, CheckpointError> {
    let path = path.as_ref();
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let bytes = checkpoint_bytes(model, train_config_hash);
    fs::write(path, &bytes).map_err(io)?;
    Ok(fs::metadata(path).map_err(io)?.len())
}

/// A decoded checkpoint.
#[derive(Debug, Clone)]
pub struct LoadedCheckpoint<F> {
    pub model: JitModel<F>,
    pub train_config_hash: String,
}

pub fn decode_checkpoint<F: Scalar>(
    path: &Path,
    bytes: &[u8],
    cache: &BackboneCache,
    loader: &dyn BackboneLoader,
) -> Result<LoadedCheckpoint<F>, CheckpointError> {
    let body = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| CheckpointError::BadMagic {
            path: path.to_path_buf(),
        })?;
    // width tag is the first field; peek at it before decoding parameters
    let scalar: String = bincode::deserialize(body).map_err(|e| CheckpointError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if scalar != F::TYPE_TAG {
        return Err(CheckpointError::ScalarMismatch {
            stored: scalar,
            requested: F::TYPE_TAG,
        });
    }
    let payload: Payload<F> = bincode::deserialize(body).map_err(|e| CheckpointError::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let weights = match payload.backbone {
        StoredBackbone::Toy => BackboneWeights::Toy(ToyEncoder::new(payload.encoder.embedding_dim)),
        StoredBackbone::Scratch(table) => BackboneWeights::Scratch(table),
        StoredBackbone::Pretrained => {
            Backbone::<F>::pretrained(payload.encoder.clone(), cache, loader)?.weights
        }
    };
    if payload.encoder.name == BackboneName::Toy && !matches!(weights, BackboneWeights::Toy(_)) {
        return Err(CheckpointError::Decode {
            path: path.to_path_buf(),
            message: "toy spec with non-toy weights".into(),
        });
    }
    payload.head.check_shapes(&payload.head_config)?;
    Ok(LoadedCheckpoint {
        model: JitModel {
            backbone: Backbone {
                spec: payload.encoder,
                weights,
            },
            config: payload.head_config,
            head: payload.head,
        },
        train_config_hash: payload.train_config_hash,
    })
}

pub fn load_checkpoint<F: Scalar>(
    path: impl AsRef<Path>,
    cache: &BackboneCache,
    loader: &dyn BackboneLoader,
) -> Result<LoadedCheckpoint<F>, CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(path, &bytes, cache, loader)
}
