//! Wire-level protocol conformance checks, runnable against any server that
//! claims to speak the model protocol: the bundled simulated server, or a
//! wrapper around a real model.

use std::time::Duration;

use reqwest::blocking::Client;
use serde::Serialize;
use serde_json::{json, Value};

use crate::backend::artifact::digest_bytes;
use crate::backend::wire::{self, CapabilitiesReply, ErrorReply, ImageReply, WireImage};
use crate::backend::{ArtifactStore, ImageFormat, ImageRef};
use crate::templates;

#[derive(Debug, Clone)]
pub struct ConformanceOptions {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Also require identical bytes for repeated seeded calls. Only
    /// meaningful for deterministic (simulated or stub) models.
    pub expect_deterministic: bool,
}

impl ConformanceOptions {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            expect_deterministic: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

struct Probe {
    client: Client,
    options: ConformanceOptions,
}

struct Reply {
    status: u16,
    body: Vec<u8>,
}

impl Reply {
    fn json<T: serde::de::DeserializeOwned>(&self) -> Result<T, String> {
        serde_json::from_slice(&self.body).map_err(|e| format!("status {} with undecodable body: {e}", self.status))
    }

    fn expect_ok<T: serde::de::DeserializeOwned>(&self) -> Result<T, String> {
        if self.status != 200 {
            return Err(format!("expected 200, got {}: {}", self.status, String::from_utf8_lossy(&self.body)));
        }
        self.json()
    }

    fn expect_error(&self, status: u16, kind: &str) -> Result<(), String> {
        let reply: ErrorReply = self.json()?;
        if self.status != status || reply.error.kind != kind {
            return Err(format!(
                "expected {status} {kind}, got {} {}: {}",
                self.status, reply.error.kind, reply.error.message
            ));
        }
        if reply.error.message.is_empty() {
            return Err("error message is empty".into());
        }
        Ok(())
    }
}

impl Probe {
    fn url(&self, path: &str) -> String {
        format!("{}{}", self.options.endpoint.trim_end_matches('/'), path)
    }

    fn send(&self, request: reqwest::blocking::RequestBuilder) -> Result<Reply, String> {
        let request = match &self.options.api_key {
            Some(key) => request.bearer_auth(key),
            None => request,
        };
        let response = request.timeout(self.options.timeout).send().map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.bytes().map_err(|e| e.to_string())?.to_vec();
        Ok(Reply { status, body })
    }

    fn get(&self, path: &str) -> Result<Reply, String> {
        self.send(self.client.get(self.url(path)))
    }

    fn post_raw(&self, path: &str, body: Vec<u8>) -> Result<Reply, String> {
        self.send(
            self.client
                .post(self.url(path))
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body),
        )
    }

    fn post(&self, path: &str, body: &Value) -> Result<Reply, String> {
        self.post_raw(path, serde_json::to_vec(body).expect("json values serialize"))
    }

    fn generate(&self, prompt: &str, seed: u64) -> Result<Reply, String> {
        self.post(
            wire::GENERATE_PATH,
            &json!({"schema_version": wire::SCHEMA_VERSION, "prompt": prompt, "seed": seed}),
        )
    }

    fn edit(&self, prompt: &str, image: &WireImage, seed: u64) -> Result<Reply, String> {
        self.post(
            wire::EDIT_PATH,
            &json!({"schema_version": wire::SCHEMA_VERSION, "prompt": prompt, "images": [image], "seed": seed}),
        )
    }

    fn understand(&self, template_id: &str, text: &str, images: &[WireImage]) -> Result<Reply, String> {
        self.post(
            wire::UNDERSTAND_PATH,
            &json!({"schema_version": wire::SCHEMA_VERSION, "template_id": template_id, "text": text, "images": images}),
        )
    }
}

const PROBE_PROMPT: &str = "a red cube on a wooden table";

fn decode_reply_image(reply: &ImageReply) -> Result<ImageRef, String> {
    let raw = wire::decode_image(&reply.image_b64, &reply.format).map_err(|e| e.to_string())?;
    if raw.bytes.is_empty() {
        return Err("empty image".into());
    }
    if let Some(detected) = ImageFormat::detect(&raw.bytes) {
        if detected != raw.format {
            return Err(format!("declared {} but bytes look like {}", raw.format.as_str(), detected.as_str()));
        }
    }
    Ok(ImageRef::from_bytes(raw.bytes, raw.format))
}

/// Runs every check and reports each one; never panics on a bad server.
pub fn run_suite(options: ConformanceOptions) -> Vec<CheckResult> {
    let client = match Client::builder().build() {
        Ok(c) => c,
        Err(e) => {
            return vec![CheckResult {
                name: "client",
                passed: false,
                detail: e.to_string(),
            }]
        }
    };
    let probe = Probe { client, options };
    let mut results = Vec::new();
    let mut record = |name: &'static str, outcome: Result<String, String>| {
        let (passed, detail) = match outcome {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        results.push(CheckResult { name, passed, detail });
    };

    let caps = probe.get(wire::CAPABILITIES_PATH).and_then(|r| r.expect_ok::<CapabilitiesReply>());
    let caps = match caps {
        Ok(c) if c.schema_version == wire::SCHEMA_VERSION => {
            record("capabilities", Ok(format!("edit={} image_understand={}", c.supports_edit, c.supports_image_in_understand)));
            c
        }
        Ok(c) => {
            record("capabilities", Err(format!("schema_version {}", c.schema_version)));
            return results;
        }
        Err(e) => {
            record("capabilities", Err(e));
            return results;
        }
    };

    let generated = probe
        .generate(PROBE_PROMPT, 7)
        .and_then(|r| r.expect_ok::<ImageReply>())
        .and_then(|r| decode_reply_image(&r));
    record("generate", generated.as_ref().map(|i| format!("{} {}", i.format.as_str(), i.short_digest())).map_err(Clone::clone));
    let Ok(image) = generated else {
        return results;
    };

    record("artifact_round_trip", artifact_round_trip(&image));

    if probe.options.expect_deterministic {
        record(
            "deterministic_generate",
            probe.generate(PROBE_PROMPT, 7).and_then(|r| r.expect_ok::<ImageReply>()).and_then(|r| {
                let again = decode_reply_image(&r)?;
                if again.digest == image.digest {
                    Ok("same digest".into())
                } else {
                    Err(format!("{} != {}", again.short_digest(), image.short_digest()))
                }
            }),
        );
    }

    record(
        "empty_prompt_rejected",
        probe.generate("", 7).and_then(|r| r.expect_error(400, "BadRequest")).map(|_| "400 BadRequest".into()),
    );
    record(
        "malformed_json_rejected",
        probe
            .post_raw(wire::GENERATE_PATH, b"{\"schema_version\": 1, \"prompt\": ".to_vec())
            .and_then(|r| r.expect_error(400, "BadRequest"))
            .map(|_| "400 BadRequest".into()),
    );
    record(
        "schema_version_enforced",
        probe
            .post(wire::GENERATE_PATH, &json!({"schema_version": 999, "prompt": PROBE_PROMPT, "seed": 7}))
            .and_then(|r| r.expect_error(400, "BadRequest"))
            .map(|_| "400 BadRequest".into()),
    );

    let wire_image = WireImage::from_image(&image).expect("decoded images carry bytes");
    let bad_image = WireImage {
        format: image.format.as_str().to_string(),
        data_b64: "%%% not base64 %%%".into(),
    };

    let judge_text = templates::JUDGE.render(&[("prompt", PROBE_PROMPT)]);
    if caps.supports_image_in_understand {
        record(
            "understand_with_image",
            probe
                .understand(templates::JUDGE.id, &judge_text, std::slice::from_ref(&wire_image))
                .and_then(|r| r.expect_ok::<serde_json::Value>())
                .and_then(|v| match v.get("text").and_then(Value::as_str) {
                    Some(t) if !t.trim().is_empty() => Ok(format!("{} chars", t.len())),
                    _ => Err(format!("reply lacks text: {v}")),
                }),
        );
        record(
            "malformed_base64_rejected",
            probe
                .understand(templates::JUDGE.id, &judge_text, &[bad_image])
                .and_then(|r| r.expect_error(400, "BadRequest"))
                .map(|_| "400 BadRequest".into()),
        );
    } else {
        record(
            "understand_image_capability_honest",
            probe
                .understand(templates::JUDGE.id, &judge_text, std::slice::from_ref(&wire_image))
                .and_then(|r| r.expect_error(501, "CapabilityMissing"))
                .map(|_| "501 CapabilityMissing".into()),
        );
    }

    if caps.supports_edit {
        let edited = probe
            .edit(PROBE_PROMPT, &wire_image, 11)
            .and_then(|r| r.expect_ok::<ImageReply>())
            .and_then(|r| decode_reply_image(&r));
        record("edit", edited.as_ref().map(|i| i.short_digest().to_string()).map_err(Clone::clone));
        if let (Ok(first), true) = (&edited, probe.options.expect_deterministic) {
            record(
                "deterministic_edit",
                probe
                    .edit(PROBE_PROMPT, &wire_image, 11)
                    .and_then(|r| r.expect_ok::<ImageReply>())
                    .and_then(|r| decode_reply_image(&r))
                    .and_then(|again| {
                        if again.digest == first.digest {
                            Ok("same digest".into())
                        } else {
                            Err("edit differs under a fixed seed".into())
                        }
                    }),
            );
        }
    } else {
        record(
            "edit_capability_honest",
            probe
                .edit(PROBE_PROMPT, &wire_image, 11)
                .and_then(|r| r.expect_error(501, "CapabilityMissing"))
                .map(|_| "501 CapabilityMissing".into()),
        );
    }
    results
}

fn artifact_round_trip(image: &ImageRef) -> Result<String, String> {
    let dir = std::env::temp_dir().join(format!("imagent-conformance-{}", uuid::Uuid::new_v4()));
    let result = (|| {
        let store = ArtifactStore::in_dir(&dir);
        let stored = store
            .put(image.require_bytes().map_err(|e| e.to_string())?.to_vec(), image.format)
            .map_err(|e| e.to_string())?;
        let mut reread: ImageRef = serde_json::to_value(&stored)
            .and_then(serde_json::from_value)
            .map_err(|e| e.to_string())?;
        reread.hydrate(&dir).map_err(|e| e.to_string())?;
        let bytes = reread.require_bytes().map_err(|e| e.to_string())?;
        if digest_bytes(bytes) != image.digest {
            return Err("digest changed across write and read".into());
        }
        Ok(stored.path.display().to_string())
    })();
    let _ = std::fs::remove_dir_all(&dir);
    result
}
