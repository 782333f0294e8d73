//! Model protocol: the three verbs every backend provides.
//!
//! `understand` answers a text prompt (optionally with images attached),
//! `generate` produces an image from a prompt and `edit` transforms an
//! existing image. Two implementations ship: [`http::HttpBackend`] for a
//! remote model server and [`sim::SimBackend`], a deterministic world where
//! images are attribute bags and alignment is exact keyword overlap.

pub mod artifact;
pub mod http;
pub mod server;
pub mod sim;
pub mod wire;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use artifact::{ArtifactError, ArtifactStore, ImageFormat, ImageRef};
pub use sim::{SimBackend, SimWorldConfig};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend call timed out: {0}")]
    Timeout(String),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("backend lacks capability: {0}")]
    CapabilityMissing(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("backend error ({kind}): {message}")]
    Remote { kind: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

impl BackendError {
    /// Error kind as it appears on the wire.
    pub fn kind(&self) -> &str {
        match self {
            BackendError::Timeout(_) => "Timeout",
            BackendError::Unreachable(_) => "Unreachable",
            BackendError::CapabilityMissing(_) => "CapabilityMissing",
            BackendError::BadRequest(_) => "BadRequest",
            BackendError::Remote { kind, .. } => kind,
            BackendError::Protocol(_) => "Protocol",
            BackendError::Artifact(_) => "UnreadableImage",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_edit: bool,
    pub supports_image_in_understand: bool,
}

impl Default for Capabilities {
    fn default() -> Self {
        Self {
            supports_edit: true,
            supports_image_in_understand: true,
        }
    }
}

/// Identifies the backend a trace was recorded against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendInfo {
    Http { endpoint: String },
    Simulated { world: SimWorldConfig },
}

#[derive(Debug, Clone)]
pub struct UnderstandRequest<'a> {
    pub template_id: &'a str,
    pub text: &'a str,
    pub images: &'a [ImageRef],
}

/// Image bytes as returned by a model, before they are stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub bytes: Vec<u8>,
    pub format: ImageFormat,
}

/// Implemented by anything that can serve the model protocol.
///
/// Implementations must be safe to call concurrently: best-of-N fans its
/// candidate calls out across threads.
pub trait ModelBackend: Send + Sync {
    fn capabilities(&self) -> Capabilities;
    fn info(&self) -> BackendInfo;
    fn understand(&self, request: &UnderstandRequest<'_>) -> Result<String, BackendError>;
    fn generate(&self, prompt: &str, seed: u64) -> Result<RawImage, BackendError>;
    fn edit(&self, prompt: &str, image: &ImageRef, seed: u64) -> Result<RawImage, BackendError>;
}

/// A model backend paired with the artifact store its images go to.
#[derive(Clone)]
pub struct BackendHandle {
    model: Arc<dyn ModelBackend>,
    store: ArtifactStore,
}

impl fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendHandle")
            .field("info", &self.model.info())
            .field("store", &self.store)
            .finish()
    }
}

impl BackendHandle {
    pub fn new(model: impl ModelBackend + 'static, store: ArtifactStore) -> Self {
        Self {
            model: Arc::new(model),
            store,
        }
    }

    pub fn from_arc(model: Arc<dyn ModelBackend>, store: ArtifactStore) -> Self {
        Self { model, store }
    }

    pub fn simulated(world: SimWorldConfig, store: ArtifactStore) -> Self {
        Self::new(SimBackend::new(world), store)
    }

    /// Same model, different artifact store.
    pub fn with_store(&self, store: ArtifactStore) -> Self {
        Self {
            model: Arc::clone(&self.model),
            store,
        }
    }

    pub fn capabilities(&self) -> Capabilities {
        self.model.capabilities()
    }

    pub fn info(&self) -> BackendInfo {
        self.model.info()
    }

    pub fn store(&self) -> &ArtifactStore {
        &self.store
    }

    pub fn understand(
        &self,
        template_id: &str,
        text: &str,
        images: &[ImageRef],
    ) -> Result<String, BackendError> {
        if !images.is_empty() && !self.capabilities().supports_image_in_understand {
            return Err(BackendError::CapabilityMissing(
                "understand with image input".to_string(),
            ));
        }
        for image in images {
            image.require_bytes()?;
        }
        self.model.understand(&UnderstandRequest {
            template_id,
            text,
            images,
        })
    }

    pub fn generate(&self, prompt: &str, seed: u64) -> Result<ImageRef, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::BadRequest("empty prompt".to_string()));
        }
        let raw = self.model.generate(prompt, seed)?;
        Ok(self.store.put(raw.bytes, raw.format)?)
    }

    pub fn edit(&self, prompt: &str, image: &ImageRef, seed: u64) -> Result<ImageRef, BackendError> {
        if !self.capabilities().supports_edit {
            return Err(BackendError::CapabilityMissing("edit".to_string()));
        }
        image.require_bytes()?;
        let raw = self.model.edit(prompt, image, seed)?;
        Ok(self.store.put(raw.bytes, raw.format)?)
    }
}
