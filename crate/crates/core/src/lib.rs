//! Just-in-time defect prediction: commit corpora, backbone encoders, a
//! convolutional fusion head, training, evaluation metrics, and the
//! experiment harness that runs them over a model x dataset grid.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the width for the common cases.

pub mod checkpoint;
pub mod corpus;
pub mod encode;
pub mod experiments;
pub mod head;
pub mod metrics;
pub mod model;
mod scalar;
pub mod train;

pub use scalar::Scalar;

pub use corpus::{CommitRecord, Corpus, Label, Patch, SplitMode, SplitSpec};
pub use encode::{Backbone, BackboneName, EncodedCommit, EncoderSpec, PatchWindow, Pooling};
pub use head::{HeadConfig, HeadParams, InputMask};
pub use metrics::{MetricsReport, PredictionResult};
pub use model::JitModel;
pub use train::{TrainConfig, TrainingTrace};

pub type JitModelF32 = JitModel<f32>;
pub type JitModelF64 = JitModel<f64>;
pub type HeadParamsF32 = HeadParams<f32>;
pub type HeadParamsF64 = HeadParams<f64>;
pub type BackboneF32 = Backbone<f32>;
pub type BackboneF64 = Backbone<f64>;
pub type EncodedCommitF32 = EncodedCommit<f32>;
pub type EncodedCommitF64 = EncodedCommit<f64>;
