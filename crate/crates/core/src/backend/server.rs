//! Serves any [`ModelBackend`] over the HTTP model protocol. Used to expose
//! the simulated world to out-of-process clients and by the conformance
//! suite's reference run.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::de::DeserializeOwned;
use serde::Serialize;
use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::{
    self, status_for, CapabilitiesReply, EditBody, ErrorDetail, ErrorReply, GenerateBody, ImageReply, TextReply,
    UnderstandBody,
};
use super::{BackendError, ImageRef, ModelBackend, UnderstandRequest};

/// Request bodies above this size are refused.
pub const MAX_BODY_BYTES: u64 = 64 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub workers: usize,
    /// When set, requests must carry `Authorization: Bearer <token>`.
    pub api_key: Option<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            listen: "127.0.0.1:0".into(),
            workers: 4,
            api_key: None,
        }
    }
}

/// A running server. Dropping it stops the workers.
pub struct ServerHandle {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until every worker exits (which only happens on shutdown).
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn serve(model: Arc<dyn ModelBackend>, config: ServerConfig) -> std::io::Result<ServerHandle> {
    let server = Server::http(&config.listen).map_err(std::io::Error::other)?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| std::io::Error::other("server is not bound to an IP address"))?;
    let server = Arc::new(server);
    let workers = (0..config.workers.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let model = Arc::clone(&model);
            let api_key = config.api_key.clone();
            std::thread::spawn(move || {
                while let Ok(request) = server.recv() {
                    handle(request, model.as_ref(), api_key.as_deref());
                }
            })
        })
        .collect();
    Ok(ServerHandle { server, addr, workers })
}

fn handle(mut request: Request, model: &dyn ModelBackend, api_key: Option<&str>) {
    let (status, body) = match route(&mut request, model, api_key) {
        Ok(body) => (200, body),
        Err((status, reply)) => (status, serde_json::to_vec(&reply).expect("error replies serialize")),
    };
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let response = Response::from_data(body).with_status_code(status).with_header(header);
    let _ = request.respond(response);
}

type Failure = (u16, ErrorReply);

fn failure(err: BackendError) -> Failure {
    (status_for(&err), ErrorReply::from_error(&err))
}

fn plain_failure(status: u16, kind: &str, message: impl Into<String>) -> Failure {
    (
        status,
        ErrorReply {
            error: ErrorDetail {
                kind: kind.to_string(),
                message: message.into(),
            },
        },
    )
}

fn encode<T: Serialize>(value: &T) -> Result<Vec<u8>, Failure> {
    serde_json::to_vec(value).map_err(|e| failure(BackendError::Protocol(e.to_string())))
}

fn read_body<T: DeserializeOwned>(request: &mut Request) -> Result<T, Failure> {
    let mut bytes = Vec::new();
    request
        .as_reader()
        .take(MAX_BODY_BYTES + 1)
        .read_to_end(&mut bytes)
        .map_err(|e| failure(BackendError::BadRequest(format!("unreadable body: {e}"))))?;
    if bytes.len() as u64 > MAX_BODY_BYTES {
        return Err(plain_failure(413, "BadRequest", "request body too large"));
    }
    serde_json::from_slice(&bytes).map_err(|e| failure(BackendError::BadRequest(format!("invalid request body: {e}"))))
}

fn check_version(found: u32) -> Result<(), Failure> {
    if found == wire::SCHEMA_VERSION {
        Ok(())
    } else {
        Err(failure(BackendError::BadRequest(format!(
            "unsupported schema_version {found}, expected {}",
            wire::SCHEMA_VERSION
        ))))
    }
}

fn authorized(request: &Request, api_key: Option<&str>) -> bool {
    let Some(key) = api_key else {
        return true;
    };
    request.headers().iter().any(|h| {
        h.field.equiv("Authorization") && h.value.as_str().strip_prefix("Bearer ").is_some_and(|t| t == key)
    })
}

fn decode_images(images: &[wire::WireImage]) -> Result<Vec<ImageRef>, Failure> {
    images
        .iter()
        .map(|w| w.decode().map(|raw| ImageRef::from_bytes(raw.bytes, raw.format)))
        .collect::<Result<_, _>>()
        .map_err(failure)
}

fn route(request: &mut Request, model: &dyn ModelBackend, api_key: Option<&str>) -> Result<Vec<u8>, Failure> {
    if !authorized(request, api_key) {
        return Err(plain_failure(401, "Unauthorized", "missing or invalid bearer token"));
    }
    let method = request.method().clone();
    let path = request.url().split('?').next().unwrap_or_default().to_string();
    match (method, path.as_str()) {
        (Method::Get, wire::CAPABILITIES_PATH) => {
            let caps = model.capabilities();
            encode(&CapabilitiesReply {
                schema_version: wire::SCHEMA_VERSION,
                supports_edit: caps.supports_edit,
                supports_image_in_understand: caps.supports_image_in_understand,
            })
        }
        (Method::Post, wire::UNDERSTAND_PATH) => {
            let body: UnderstandBody = read_body(request)?;
            check_version(body.schema_version)?;
            if !body.images.is_empty() && !model.capabilities().supports_image_in_understand {
                return Err(failure(BackendError::CapabilityMissing("understand with image input".into())));
            }
            let images = decode_images(&body.images)?;
            let text = model
                .understand(&UnderstandRequest {
                    template_id: &body.template_id,
                    text: &body.text,
                    images: &images,
                })
                .map_err(failure)?;
            encode(&TextReply { text })
        }
        (Method::Post, wire::GENERATE_PATH) => {
            let body: GenerateBody = read_body(request)?;
            check_version(body.schema_version)?;
            if body.prompt.trim().is_empty() {
                return Err(failure(BackendError::BadRequest("empty prompt".into())));
            }
            let raw = model.generate(&body.prompt, body.seed).map_err(failure)?;
            encode(&ImageReply::from_raw(&raw))
        }
        (Method::Post, wire::EDIT_PATH) => {
            let body: EditBody = read_body(request)?;
            check_version(body.schema_version)?;
            if !model.capabilities().supports_edit {
                return Err(failure(BackendError::CapabilityMissing("edit".into())));
            }
            let images = decode_images(&body.images)?;
            let [image] = images.as_slice() else {
                return Err(failure(BackendError::BadRequest(format!(
                    "edit takes exactly one image, got {}",
                    images.len()
                ))));
            };
            let raw = model.edit(&body.prompt, image, body.seed).map_err(failure)?;
            encode(&ImageReply::from_raw(&raw))
        }
        (_, p) if [wire::CAPABILITIES_PATH, wire::UNDERSTAND_PATH, wire::GENERATE_PATH, wire::EDIT_PATH].contains(&p) => {
            Err(plain_failure(405, "BadRequest", "method not allowed"))
        }
        (_, p) => Err(plain_failure(404, "NotFound", format!("no route {p}"))),
    }
}
