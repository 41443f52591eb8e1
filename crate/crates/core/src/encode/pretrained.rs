use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use super::{EncodeError, EncoderSpec, Pooling};

/// Overrides the backbone cache root.
pub const CACHE_ENV: &str = "JITDP_CACHE";
/// Any value other than empty, `0` or `false` forbids network fetches.
pub const OFFLINE_ENV: &str = "JITDP_OFFLINE";

/// A frozen pre-trained sequence encoder. Inference only; safe to share
/// between threads.
pub trait PretrainedEncoder: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Pooled hidden state for a non-empty sequence of whitespace tokens.
    fn encode(&self, tokens: &[String], pooling: Pooling) -> Vec<f32>;

    fn parameter_count(&self) -> usize;

    /// Bytes of weight files backing this encoder.
    fn weight_bytes(&self) -> u64;
}

/// Builds pre-trained encoders from cached weights.
pub trait BackboneLoader: Send + Sync {
    fn load(
        &self,
        spec: &EncoderSpec,
        cache: &BackboneCache,
    ) -> Result<Arc<dyn PretrainedEncoder>, EncodeError>;
}

/// Loader used when no pre-trained implementation is linked in.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoPretrainedLoader;

impl BackboneLoader for NoPretrainedLoader {
    fn load(
        &self,
        spec: &EncoderSpec,
        cache: &BackboneCache,
    ) -> Result<Arc<dyn PretrainedEncoder>, EncodeError> {
        Err(EncodeError::Unavailable {
            name: spec.name,
            dir: cache.dir_for(spec),
            reason: "no pre-trained loader is configured".into(),
        })
    }
}

/// On-disk layout `<root>/<backbone name>/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneCache {
    pub root: PathBuf,
    pub offline: bool,
}

fn truthy(value: &str) -> bool {
    !matches!(value.trim().to_ascii_lowercase().as_str(), "" | "0" | "false" | "no")
}

impl BackboneCache {
    pub fn new(root: impl Into<PathBuf>, offline: bool) -> Self {
        BackboneCache {
            root: root.into(),
            offline,
        }
    }

    /// Root from `JITDP_CACHE`, else `$HOME/.cache/jitdp`; offline when
    /// `JITDP_OFFLINE` is set.
    pub fn from_env() -> Self {
        let root = std::env::var_os(CACHE_ENV)
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("HOME").map(|h| Path::new(&h).join(".cache/jitdp")))
            .unwrap_or_else(|| PathBuf::from(".jitdp-cache"));
        let offline = std::env::var(OFFLINE_ENV).map(|v| truthy(&v)).unwrap_or(false);
        BackboneCache { root, offline }
    }

    pub fn dir_for(&self, spec: &EncoderSpec) -> PathBuf {
        self.root.join(spec.name.as_str())
    }

    /// Returns the backbone directory when every file in `required` exists.
    pub fn locate(&self, spec: &EncoderSpec, required: &[&str]) -> Result<PathBuf, EncodeError> {
        let dir = self.dir_for(spec);
        let missing: Vec<&str> = required
            .iter()
            .copied()
            .filter(|f| !dir.join(f).is_file())
            .collect();
        if missing.is_empty() {
            return Ok(dir);
        }
        let hub = spec.hub_id.as_deref().unwrap_or("<no hub id>");
        let reason = if self.offline {
            format!("missing {} and offline mode forbids fetching {hub}", missing.join(", "))
        } else {
            format!("missing {} (fetch {hub} into this directory)", missing.join(", "))
        };
        Err(EncodeError::Unavailable {
            name: spec.name,
            dir,
            reason,
        })
    }
}
