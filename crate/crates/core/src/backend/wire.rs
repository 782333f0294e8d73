//! JSON bodies of the HTTP model protocol (schema version 1).
//!
//! Field order here is the serialized order; the golden fixtures under
//! `tests/fixtures/wire/` pin the exact bytes.

use base64::Engine as _;
use base64::engine::general_purpose::STANDARD as B64;
use serde::{Deserialize, Serialize};

use super::{BackendError, ImageFormat, ImageRef, RawImage};

pub const SCHEMA_VERSION: u32 = 1;

pub const UNDERSTAND_PATH: &str = "/v1/understand";
pub const GENERATE_PATH: &str = "/v1/generate";
pub const EDIT_PATH: &str = "/v1/edit";
pub const CAPABILITIES_PATH: &str = "/v1/capabilities";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireImage {
    pub format: String,
    pub data_b64: String,
}

impl WireImage {
    pub fn from_image(image: &ImageRef) -> Result<Self, BackendError> {
        Ok(Self {
            format: image.format.as_str().to_string(),
            data_b64: B64.encode(image.require_bytes()?),
        })
    }

    pub fn decode(&self) -> Result<RawImage, BackendError> {
        decode_image(&self.data_b64, &self.format)
    }
}

pub fn decode_image(data_b64: &str, format: &str) -> Result<RawImage, BackendError> {
    let format = ImageFormat::parse(format)
        .ok_or_else(|| BackendError::BadRequest(format!("unknown image format {format:?}")))?;
    let bytes = B64
        .decode(data_b64)
        .map_err(|e| BackendError::BadRequest(format!("malformed base64 image: {e}")))?;
    Ok(RawImage { bytes, format })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnderstandBody {
    pub schema_version: u32,
    pub template_id: String,
    pub text: String,
    pub images: Vec<WireImage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateBody {
    pub schema_version: u32,
    pub prompt: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditBody {
    pub schema_version: u32,
    pub prompt: String,
    pub images: Vec<WireImage>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextReply {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageReply {
    pub image_b64: String,
    pub format: String,
}

impl ImageReply {
    pub fn from_raw(raw: &RawImage) -> Self {
        Self {
            image_b64: B64.encode(&raw.bytes),
            format: raw.format.as_str().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilitiesReply {
    pub schema_version: u32,
    pub supports_edit: bool,
    pub supports_image_in_understand: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub error: ErrorDetail,
}

impl ErrorReply {
    pub fn from_error(err: &BackendError) -> Self {
        Self {
            error: ErrorDetail {
                kind: err.kind().to_string(),
                message: err.to_string(),
            },
        }
    }

    /// Maps a wire error back onto the client-side taxonomy.
    pub fn into_error(self) -> BackendError {
        let ErrorDetail { kind, message } = self.error;
        match kind.as_str() {
            "Timeout" => BackendError::Timeout(message),
            "Unreachable" => BackendError::Unreachable(message),
            "CapabilityMissing" => BackendError::CapabilityMissing(message),
            "BadRequest" => BackendError::BadRequest(message),
            _ => BackendError::Remote { kind, message },
        }
    }
}

/// HTTP status a server should use for an error kind.
pub fn status_for(err: &BackendError) -> u16 {
    match err {
        BackendError::BadRequest(_) | BackendError::Artifact(_) => 400,
        BackendError::CapabilityMissing(_) => 501,
        BackendError::Unreachable(_) => 503,
        BackendError::Timeout(_) => 504,
        BackendError::Remote { .. } | BackendError::Protocol(_) => 500,
    }
}
