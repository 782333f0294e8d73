//! Blocking HTTP client for a remote model server speaking the wire schemas
//! in [`super::wire`].

use std::time::Duration;

use reqwest::blocking::{Client, RequestBuilder, Response};
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::wire::{
    self, CapabilitiesReply, EditBody, ErrorReply, GenerateBody, ImageReply, TextReply,
    UnderstandBody, WireImage,
};
use super::{BackendError, BackendInfo, Capabilities, ImageRef, ModelBackend, RawImage, UnderstandRequest};

pub const ENV_ENDPOINT: &str = "IMAGENT_ENDPOINT";
pub const ENV_API_KEY: &str = "IMAGENT_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub understand_timeout: Duration,
    pub generate_timeout: Duration,
    pub edit_timeout: Duration,
    pub capabilities: Option<Capabilities>,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            understand_timeout: Duration::from_secs(60),
            generate_timeout: Duration::from_secs(120),
            edit_timeout: Duration::from_secs(120),
            capabilities: None,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    pub fn with_timeouts(mut self, timeout: Duration) -> Self {
        self.understand_timeout = timeout;
        self.generate_timeout = timeout;
        self.edit_timeout = timeout;
        self
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: Client,
    capabilities: Capabilities,
}

impl HttpBackend {
    /// Builds a client without contacting the server. Capabilities come from
    /// the config, defaulting to full support.
    pub fn new(config: HttpConfig) -> Result<Self, BackendError> {
        let client = Client::builder()
            .build()
            .map_err(|e| BackendError::Protocol(format!("http client: {e}")))?;
        let capabilities = config.capabilities.unwrap_or_default();
        Ok(Self {
            config,
            client,
            capabilities,
        })
    }

    /// Builds a client and asks the server what it supports.
    pub fn connect(config: HttpConfig) -> Result<Self, BackendError> {
        let mut backend = Self::new(config)?;
        let reply: CapabilitiesReply = backend.receive(
            backend
                .client
                .get(backend.url(wire::CAPABILITIES_PATH))
                .timeout(backend.config.understand_timeout),
        )?;
        if reply.schema_version != wire::SCHEMA_VERSION {
            return Err(BackendError::Protocol(format!(
                "server speaks schema {}, client speaks {}",
                reply.schema_version,
                wire::SCHEMA_VERSION
            )));
        }
        backend.capabilities = Capabilities {
            supports_edit: reply.supports_edit,
            supports_image_in_understand: reply.supports_image_in_understand,
        };
        Ok(backend)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
        timeout: Duration,
    ) -> Result<R, BackendError> {
        let body = serde_json::to_vec(body).map_err(|e| BackendError::Protocol(e.to_string()))?;
        let request = self
            .client
            .post(self.url(path))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .timeout(timeout);
        self.receive(request)
    }

    fn receive<R: DeserializeOwned>(&self, request: RequestBuilder) -> Result<R, BackendError> {
        let request = match &self.config.api_key {
            Some(key) => request.bearer_auth(key),
            None => request,
        };
        let response = request.send().map_err(classify_transport)?;
        decode_response(response)
    }
}

fn classify_transport(err: reqwest::Error) -> BackendError {
    if err.is_timeout() {
        BackendError::Timeout(err.to_string())
    } else {
        BackendError::Unreachable(err.to_string())
    }
}

fn decode_response<R: DeserializeOwned>(response: Response) -> Result<R, BackendError> {
    let status = response.status().as_u16();
    let bytes = response.bytes().map_err(classify_transport)?;
    if (200..300).contains(&status) {
        return serde_json::from_slice(&bytes)
            .map_err(|e| BackendError::Protocol(format!("unexpected response body: {e}")));
    }
    let detail = serde_json::from_slice::<ErrorReply>(&bytes).ok();
    let message = detail
        .as_ref()
        .map(|d| d.error.message.clone())
        .unwrap_or_else(|| format!("HTTP {status}"));
    match status {
        502 | 503 => Err(BackendError::Unreachable(message)),
        504 => Err(BackendError::Timeout(message)),
        _ => match detail {
            Some(reply) => Err(reply.into_error()),
            None => Err(BackendError::Remote {
                kind: format!("Http{status}"),
                message,
            }),
        },
    }
}

impl ModelBackend for HttpBackend {
    fn capabilities(&self) -> Capabilities {
        self.capabilities
    }

    fn info(&self) -> BackendInfo {
        BackendInfo::Http {
            endpoint: self.config.endpoint.clone(),
        }
    }

    fn understand(&self, request: &UnderstandRequest<'_>) -> Result<String, BackendError> {
        let body = UnderstandBody {
            schema_version: wire::SCHEMA_VERSION,
            template_id: request.template_id.to_string(),
            text: request.text.to_string(),
            images: request
                .images
                .iter()
                .map(WireImage::from_image)
                .collect::<Result<_, _>>()?,
        };
        let reply: TextReply = self.post(wire::UNDERSTAND_PATH, &body, self.config.understand_timeout)?;
        Ok(reply.text)
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<RawImage, BackendError> {
        let body = GenerateBody {
            schema_version: wire::SCHEMA_VERSION,
            prompt: prompt.to_string(),
            seed,
        };
        let reply: ImageReply = self.post(wire::GENERATE_PATH, &body, self.config.generate_timeout)?;
        wire::decode_image(&reply.image_b64, &reply.format)
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }

    fn edit(&self, prompt: &str, image: &ImageRef, seed: u64) -> Result<RawImage, BackendError> {
        if !self.capabilities.supports_edit {
            return Err(BackendError::CapabilityMissing("edit".into()));
        }
        let body = EditBody {
            schema_version: wire::SCHEMA_VERSION,
            prompt: prompt.to_string(),
            images: vec![WireImage::from_image(image)?],
            seed,
        };
        let reply: ImageReply = self.post(wire::EDIT_PATH, &body, self.config.edit_timeout)?;
        wire::decode_image(&reply.image_b64, &reply.format)
            .map_err(|e| BackendError::Protocol(e.to_string()))
    }
}
