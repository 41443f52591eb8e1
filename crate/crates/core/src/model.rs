use rayon::prelude::*;
use thiserror::Error;

use crate::corpus::{CommitRecord, Corpus};
use crate::encode::{Backbone, BackboneWeights, EncodeError, EncodedCommit};
use crate::head::{head_forward, HeadConfig, HeadError, HeadParams, InputMask};
use crate::metrics::PredictionResult;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("head expects embedding width {head}, backbone produces {backbone}")]
    WidthMismatch { head: usize, backbone: usize },
}

/// A backbone encoder plus classification head.
#[derive(Debug, Clone)]
pub struct JitModel<F> {
    pub backbone: Backbone<F>,
    pub config: HeadConfig,
    pub head: HeadParams<F>,
}

impl<F: Scalar> JitModel<F> {
    /// Randomly initialized head over `backbone`.
    pub fn new(backbone: Backbone<F>, config: HeadConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if config.embedding_dim != backbone.dim() {
            return Err(ModelError::WidthMismatch {
                head: config.embedding_dim,
                backbone: backbone.dim(),
            });
        }
        let head = HeadParams::init(&config, seed);
        Ok(JitModel {
            backbone,
            config,
            head,
        })
    }

    /// Branches the model was built with.
    pub fn branches(&self) -> InputMask {
        self.config.branches
    }

    pub fn encode(&self, record: &CommitRecord) -> EncodedCommit<F> {
        self.backbone.encode_commit(record, self.config.window)
    }

    pub fn forward_encoded(&self, encoded: &EncodedCommit<F>, mask: InputMask) -> Result<F, HeadError> {
        Ok(head_forward(&self.head, encoded, mask, None)?.score)
    }

    /// Defect probability for one commit in inference mode.
    pub fn forward(&self, record: &CommitRecord, mask: InputMask) -> Result<F, HeadError> {
        self.forward_encoded(&self.encode(record), mask)
    }

    /// Scores every record with the model's own branches.
    pub fn predict(&self, corpus: &Corpus) -> Result<Vec<PredictionResult>, HeadError> {
        let mask = self.branches();
        corpus
            .records
            .par_iter()
            .map(|r| {
                let score = self.forward(r, mask)?.to_f64_lossy();
                Ok(PredictionResult::new(r.commit_id.clone(), score, r.label))
            })
            .collect()
    }

    /// Trainable plus frozen parameters.
    pub fn parameter_count(&self) -> usize {
        let backbone = match &self.backbone.weights {
            BackboneWeights::Toy(_) => 0,
            BackboneWeights::Scratch(t) => t.weights.len(),
            BackboneWeights::Pretrained(p) => p.parameter_count(),
        };
        self.head.parameter_count() + backbone
    }
}

/// Scores one commit; `mask` may drop a branch the model has, never add one.
pub fn forward<F: Scalar>(
    model: &JitModel<F>,
    record: &CommitRecord,
    mask: InputMask,
) -> Result<F, HeadError> {
    model.forward(record, mask)
}
