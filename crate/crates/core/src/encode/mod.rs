//! Backbone encoders: patch-window assembly and the mapping from token
//! sequences to the patch matrix and message vector consumed by the head.

mod embedding;
mod pretrained;
mod toy;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CommitRecord, Corpus, Patch};
use crate::Scalar;

pub use embedding::{EmbeddingTable, Vocabulary, UNKNOWN_TOKEN};
pub use pretrained::{
    BackboneCache, BackboneLoader, NoPretrainedLoader, PretrainedEncoder, CACHE_ENV, OFFLINE_ENV,
};
pub use toy::{toy_token_vector, ToyEncoder};

/// Number of patches kept per commit.
pub const DEFAULT_WINDOW: usize = 4;
pub const DEFAULT_MAX_PATCH_TOKENS: usize = 256;
pub const DEFAULT_MAX_MESSAGE_TOKENS: usize = 64;
/// Separator inserted between the changed lines of a patch.
pub const LINE_SEPARATOR: &str = "<nl>";

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("unknown backbone {0:?}; valid names: {}", BackboneName::valid_names())]
    UnknownBackbone(String),
    #[error("backbone {name} is not available in {}: {reason}", dir.display())]
    Unavailable {
        name: BackboneName,
        dir: PathBuf,
        reason: String,
    },
    #[error("backbone {name} failed to load: {message}")]
    Load { name: BackboneName, message: String },
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneName {
    Roberta,
    Codebert,
    Gpt2,
    Codegpt,
    Bart,
    Plbart,
    Scratch,
    Toy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Encoder,
    Decoder,
    EncoderDecoder,
    /// Token embedding table without contextual layers.
    Bag,
}

impl BackboneName {
    pub const ALL: [BackboneName; 8] = [
        BackboneName::Roberta,
        BackboneName::Codebert,
        BackboneName::Gpt2,
        BackboneName::Codegpt,
        BackboneName::Bart,
        BackboneName::Plbart,
        BackboneName::Scratch,
        BackboneName::Toy,
    ];

    /// The six pre-trained backbones, in table order.
    pub const PRETRAINED: [BackboneName; 6] = [
        BackboneName::Roberta,
        BackboneName::Codebert,
        BackboneName::Gpt2,
        BackboneName::Codegpt,
        BackboneName::Bart,
        BackboneName::Plbart,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::Roberta => "roberta",
            BackboneName::Codebert => "codebert",
            BackboneName::Gpt2 => "gpt2",
            BackboneName::Codegpt => "codegpt",
            BackboneName::Bart => "bart",
            BackboneName::Plbart => "plbart",
            BackboneName::Scratch => "scratch",
            BackboneName::Toy => "toy",
        }
    }

    /// Display name of the full model built on this backbone.
    pub fn model_name(self) -> &'static str {
        match self {
            BackboneName::Roberta => "RoBERTaJIT",
            BackboneName::Codebert => "CodeBERTJIT",
            BackboneName::Gpt2 => "GPT2JIT",
            BackboneName::Codegpt => "CodeGPTJIT",
            BackboneName::Bart => "BARTJIT",
            BackboneName::Plbart => "PLBARTJIT",
            BackboneName::Scratch => "ScratchJIT",
            BackboneName::Toy => "ToyJIT",
        }
    }

    pub fn valid_names() -> String {
        BackboneName::ALL
            .iter()
            .map(|b| b.as_str())
            .collect::<Vec<_>>()
            .join(", ")
    }

    pub fn architecture(self) -> Architecture {
        match self {
            BackboneName::Roberta | BackboneName::Codebert => Architecture::Encoder,
            BackboneName::Gpt2 | BackboneName::Codegpt => Architecture::Decoder,
            BackboneName::Bart | BackboneName::Plbart => Architecture::EncoderDecoder,
            BackboneName::Scratch | BackboneName::Toy => Architecture::Bag,
        }
    }

    pub fn is_pretrained(self) -> bool {
        self.architecture() != Architecture::Bag
    }

    pub fn default_hub_id(self) -> Option<&'static str> {
        match self {
            BackboneName::Roberta => Some("roberta-base"),
            BackboneName::Codebert => Some("microsoft/codebert-base"),
            BackboneName::Gpt2 => Some("gpt2"),
            BackboneName::Codegpt => Some("microsoft/CodeGPT-small-py-adaptedGPT2"),
            BackboneName::Bart => Some("facebook/bart-base"),
            BackboneName::Plbart => Some("uclanlp/plbart-base"),
            BackboneName::Scratch | BackboneName::Toy => None,
        }
    }

    pub fn default_pooling(self) -> Pooling {
        match self.architecture() {
            Architecture::Encoder => Pooling::FirstToken,
            Architecture::Decoder => Pooling::LastToken,
            Architecture::EncoderDecoder | Architecture::Bag => Pooling::Mean,
        }
    }

    pub fn default_dim(self) -> usize {
        match self {
            BackboneName::Scratch => 64,
            BackboneName::Toy => 16,
            _ => 768,
        }
    }
}

impl fmt::Display for BackboneName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneName {
    type Err = EncodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackboneName::ALL
            .into_iter()
            .find(|b| b.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| EncodeError::UnknownBackbone(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    FirstToken,
    /// Last non-padding position.
    LastToken,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub name: BackboneName,
    pub embedding_dim: usize,
    pub max_patch_tokens: usize,
    pub max_message_tokens: usize,
    pub pooling: Pooling,
    pub hub_id: Option<String>,
}

impl EncoderSpec {
    pub fn for_backbone(name: BackboneName) -> Self {
        EncoderSpec {
            name,
            embedding_dim: name.default_dim(),
            max_patch_tokens: DEFAULT_MAX_PATCH_TOKENS,
            max_message_tokens: DEFAULT_MAX_MESSAGE_TOKENS,
            pooling: name.default_pooling(),
            hub_id: name.default_hub_id().map(str::to_string),
        }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim;
        self
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.embedding_dim == 0 {
            return Err(EncodeError::InvalidSpec("embedding_dim must be positive".into()));
        }
        if self.max_patch_tokens == 0 || self.max_message_tokens == 0 {
            return Err(EncodeError::InvalidSpec("token limits must be positive".into()));
        }
        if self.pooling != self.name.default_pooling() {
            return Err(EncodeError::InvalidSpec(format!(
                "{} backbones pool with {:?}",
                self.name, self.name.default_pooling()
            )));
        }
        Ok(())
    }
}

/// Exactly `window` patches; real patches keep their order and sit in the
/// rightmost slots, empty patches pad on the left.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchWindow {
    pub patches: Vec<Patch>,
}

impl PatchWindow {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn padding(&self) -> usize {
        self.patches.iter().take_while(|p| p.is_empty()).count()
    }
}

/// Keeps the `window` most recent patches, left-padding with empty patches.
///
/// # Panics
/// If `window` is zero.
pub fn assemble_patches(record: &CommitRecord, window: usize) -> PatchWindow {
    assert!(window >= 1, "patch window must hold at least one patch");
    let recent = &record.patches[record.patches.len().saturating_sub(window)..];
    let mut patches = vec![Patch::empty(); window - recent.len()];
    patches.extend(recent.iter().cloned());
    PatchWindow { patches }
}

/// Token sequence fed to the backbone for one patch: each line's marker and
/// tokens, lines joined by [`LINE_SEPARATOR`].
pub fn patch_tokens(patch: &Patch) -> Vec<String> {
    let mut tokens = Vec::new();
    for (i, line) in patch.lines.iter().enumerate() {
        if i > 0 {
            tokens.push(LINE_SEPARATOR.to_string());
        }
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    tokens
}

/// Stacked patch rows and message vector for one commit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodedCommit<F> {
    /// `window x d`, one row per patch slot.
    pub code: Array2<F>,
    pub message: Array1<F>,
}

impl<F: Scalar> EncodedCommit<F> {
    pub fn is_finite(&self) -> bool {
        self.code.iter().chain(self.message.iter()).all(|v| v.is_finite())
    }
}

/// Weights behind a backbone.
#[derive(Clone)]
pub enum BackboneWeights<F> {
    Toy(ToyEncoder),
    Scratch(EmbeddingTable<F>),
    Pretrained(Arc<dyn PretrainedEncoder>),
}

impl<F> fmt::Debug for BackboneWeights<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackboneWeights::Toy(t) => f.debug_tuple("Toy").field(t).finish(),
            BackboneWeights::Scratch(t) => f
                .debug_struct("Scratch")
                .field("vocab", &t.vocab.len())
                .field("dim", &t.weights.ncols())
                .finish(),
            BackboneWeights::Pretrained(p) => f.debug_tuple("Pretrained").field(p).finish(),
        }
    }
}

/// A loaded backbone: its spec plus the weights that realize it.
#[derive(Debug, Clone)]
pub struct Backbone<F> {
    pub spec: EncoderSpec,
    pub weights: BackboneWeights<F>,
}

impl<F: Scalar> Backbone<F> {
    pub fn toy(dim: usize) -> Self {
        let spec = EncoderSpec::for_backbone(BackboneName::Toy).with_dim(dim);
        Backbone {
            weights: BackboneWeights::Toy(ToyEncoder::new(dim)),
            spec,
        }
    }

    /// A trainable embedding table over the vocabulary of `corpus`.
    pub fn scratch(dim: usize, corpus: &Corpus, seed: u64) -> Self {
        let spec = EncoderSpec::for_backbone(BackboneName::Scratch).with_dim(dim);
        let vocab = Vocabulary::from_corpus(corpus, 1, None);
        Backbone {
            weights: BackboneWeights::Scratch(EmbeddingTable::new(vocab, dim, seed)),
            spec,
        }
    }

    /// Loads a pre-trained backbone through `loader`, resolving weights in `cache`.
    pub fn pretrained(
        spec: EncoderSpec,
        cache: &BackboneCache,
        loader: &dyn BackboneLoader,
    ) -> Result<Self, EncodeError> {
        spec.validate()?;
        let encoder = loader.load(&spec, cache)?;
        if encoder.dim() != spec.embedding_dim {
            return Err(EncodeError::Load {
                name: spec.name,
                message: format!(
                    "weights have hidden size {} but spec says {}",
                    encoder.dim(),
                    spec.embedding_dim
                ),
            });
        }
        Ok(Backbone {
            spec,
            weights: BackboneWeights::Pretrained(encoder),
        })
    }

    pub fn dim(&self) -> usize {
        self.spec.embedding_dim
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.weights, BackboneWeights::Scratch(_))
    }

    /// Encodes an already-truncated, non-empty token sequence.
    fn encode_tokens(&self, tokens: &[String]) -> Array1<F> {
        match &self.weights {
            BackboneWeights::Toy(toy) => toy.encode(tokens),
            BackboneWeights::Scratch(table) => table.encode(tokens),
            BackboneWeights::Pretrained(model) => {
                let out = model.encode(tokens, self.spec.pooling);
                out.into_iter().map(|v| F::from_f64_lossy(f64::from(v))).collect()
            }
        }
    }

    fn encode_truncated(&self, tokens: &[String], limit: usize) -> Array1<F> {
        let tokens = &tokens[..tokens.len().min(limit)];
        if tokens.is_empty() {
            Array1::zeros(self.dim())
        } else {
            self.encode_tokens(tokens)
        }
    }

    /// Patch embedding; the empty patch maps to the zero vector.
    pub fn encode_patch(&self, patch: &Patch) -> Array1<F> {
        self.encode_truncated(&patch_tokens(patch), self.spec.max_patch_tokens)
    }

    /// Row `i` is the embedding of `window.patches[i]`.
    pub fn encode_commit_code(&self, window: &PatchWindow) -> Array2<F> {
        let mut code = Array2::zeros((window.len(), self.dim()));
        for (mut row, patch) in code.rows_mut().into_iter().zip(&window.patches) {
            row.assign(&self.encode_patch(patch));
        }
        code
    }

    /// Message embedding; an empty message maps to the zero vector.
    pub fn encode_message(&self, message: &[String]) -> Array1<F> {
        self.encode_truncated(message, self.spec.max_message_tokens)
    }

    pub fn encode_commit(&self, record: &CommitRecord, window: usize) -> EncodedCommit<F> {
        EncodedCommit {
            code: self.encode_commit_code(&assemble_patches(record, window)),
            message: self.encode_message(&record.message),
        }
    }

    /// Truncated token sequences for each window slot and the message, in
    /// the form the trainable backbone consumes during backpropagation.
    pub fn commit_token_slots(&self, record: &CommitRecord, window: usize) -> CommitTokens {
        let window = assemble_patches(record, window);
        let patches = window
            .patches
            .iter()
            .map(|p| {
                let mut t = patch_tokens(p);
                t.truncate(self.spec.max_patch_tokens);
                t
            })
            .collect();
        let mut message = record.message.clone();
        message.truncate(self.spec.max_message_tokens);
        CommitTokens { patches, message }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitTokens {
    pub patches: Vec<Vec<String>>,
    pub message: Vec<String>,
}
