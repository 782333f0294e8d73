#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use imagent::backend::server::{serve, ServerConfig, ServerHandle};
use imagent::backend::{ArtifactStore, BackendHandle, ImageRef, SimBackend, SimWorldConfig};

pub fn sim(world: SimWorldConfig) -> BackendHandle {
    BackendHandle::simulated(world, ArtifactStore::in_memory())
}

pub fn noiseless() -> BackendHandle {
    sim(SimWorldConfig::default().with_noise(0.0))
}

pub fn vocabulary() -> Vec<String> {
    SimWorldConfig::default().vocabulary
}

/// Prompt keywords recomputed without the library: lowercase alphanumeric
/// runs that appear in the vocabulary.
pub fn oracle_keywords(vocabulary: &[String], text: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut word = String::new();
    for c in text.chars().chain(std::iter::once(' ')) {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else if !word.is_empty() {
            if vocabulary.contains(&word) {
                out.insert(word.clone());
            }
            word.clear();
        }
    }
    out
}

/// Attribute set decoded straight from the artifact bytes.
pub fn oracle_attributes(image: &ImageRef) -> BTreeSet<String> {
    let bytes = image.bytes().expect("image bytes loaded");
    let value: serde_json::Value = serde_json::from_slice(bytes).expect("sim-json artifact");
    value["attributes"]
        .as_array()
        .expect("attributes array")
        .iter()
        .map(|v| v.as_str().expect("string attribute").to_string())
        .collect()
}

/// `(matched, total)` keyword overlap between a prompt and an image.
pub fn oracle_overlap(vocabulary: &[String], prompt: &str, image: &ImageRef) -> (usize, usize) {
    let keywords = oracle_keywords(vocabulary, prompt);
    let attributes = oracle_attributes(image);
    (keywords.intersection(&attributes).count(), keywords.len())
}

pub fn oracle_score(vocabulary: &[String], prompt: &str, image: &ImageRef) -> f64 {
    let (m, k) = oracle_overlap(vocabulary, prompt, image);
    if k == 0 {
        1.0
    } else {
        m as f64 / k as f64
    }
}

pub fn sim_image(attributes: &[&str]) -> ImageRef {
    let mut sorted: Vec<&str> = attributes.to_vec();
    sorted.sort();
    sorted.dedup();
    let bytes = serde_json::to_vec(&serde_json::json!({ "attributes": sorted })).unwrap();
    ImageRef::from_bytes(bytes, imagent::backend::ImageFormat::SimJson)
}

pub fn spawn_sim_server(world: SimWorldConfig) -> ServerHandle {
    serve(Arc::new(SimBackend::new(world)), ServerConfig::default()).expect("bind sim server")
}
