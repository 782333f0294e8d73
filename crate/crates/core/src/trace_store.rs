//! Trace persistence, validation and replay.
//!
//! A run directory looks like
//!
//! ```text
//! <run_dir>/
//!   trace.json          TraceFile, schema in schema/trace.schema.json
//!   artifacts/          <sha256>.<ext>, one file per distinct image
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::agent::{run_editing_with, run_generation_with, Mode, Terminal, Trace};
use crate::backend::artifact::{digest_bytes, ARTIFACT_DIR};
use crate::backend::{BackendHandle, ImageRef};
use crate::policy::{ActionKind, ForcedPolicy};

pub const SCHEMA_VERSION: u32 = 1;
pub const TRACE_FILE: &str = "trace.json";
pub const TRACE_SCHEMA: &str = include_str!("../schema/trace.schema.json");

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("trace io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed trace: {0}")]
    Json(#[from] serde_json::Error),
    #[error("trace schema version {found} is not supported (expected {expected})")]
    SchemaMismatch { found: u64, expected: u32 },
    #[error("image {digest} referenced by the trace has no file at {path}")]
    DanglingArtifact { digest: String, path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub schema_version: u32,
    pub artifact_dir: String,
    pub trace: Trace,
}

/// Every image reference a trace carries.
fn referenced_images(trace: &Trace) -> impl Iterator<Item = &ImageRef> {
    trace
        .initial_image
        .iter()
        .chain(trace.steps.iter().filter_map(|s| s.image_after.as_ref()))
        .chain(trace.final_image.iter())
}

fn referenced_images_mut(trace: &mut Trace) -> Vec<&mut ImageRef> {
    let mut out: Vec<&mut ImageRef> = Vec::new();
    out.extend(trace.initial_image.as_mut());
    out.extend(trace.steps.iter_mut().filter_map(|s| s.image_after.as_mut()));
    out.extend(trace.final_image.as_mut());
    out
}

/// Writes `dir/trace.json` atomically. Every referenced image must already
/// be present under `dir`.
pub fn save_trace(trace: &Trace, dir: &Path) -> Result<PathBuf, TraceError> {
    for image in referenced_images(trace) {
        let path = dir.join(&image.path);
        if !path.is_file() {
            return Err(TraceError::DanglingArtifact {
                digest: image.digest.clone(),
                path,
            });
        }
    }
    let file = TraceFile {
        schema_version: SCHEMA_VERSION,
        artifact_dir: ARTIFACT_DIR.to_string(),
        trace: trace.clone(),
    };
    let mut body = serde_json::to_vec_pretty(&file)?;
    body.push(b'\n');
    fs::create_dir_all(dir)?;
    let target = dir.join(TRACE_FILE);
    let tmp = dir.join(format!(".{TRACE_FILE}.{}.tmp", uuid::Uuid::new_v4().simple()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&body)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, &target)?;
    Ok(target)
}

fn check_version(value: &serde_json::Value) -> Result<(), TraceError> {
    let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != SCHEMA_VERSION as u64 {
        return Err(TraceError::SchemaMismatch {
            found,
            expected: SCHEMA_VERSION,
        });
    }
    Ok(())
}

/// Loads a trace and hydrates the images whose files are present.
pub fn load_trace(path: &Path) -> Result<Trace, TraceError> {
    let value: serde_json::Value = serde_json::from_slice(&fs::read(path)?)?;
    check_version(&value)?;
    let file: TraceFile = serde_json::from_value(value)?;
    let run_dir = path.parent().unwrap_or(Path::new("."));
    let mut trace = file.trace;
    for image in referenced_images_mut(&mut trace) {
        // Missing or corrupt files are reported by `validate`.
        let _ = image.hydrate(run_dir);
    }
    Ok(trace)
}

fn schema_validator() -> &'static jsonschema::Validator {
    static VALIDATOR: OnceLock<jsonschema::Validator> = OnceLock::new();
    VALIDATOR.get_or_init(|| {
        let schema: serde_json::Value = serde_json::from_str(TRACE_SCHEMA).expect("shipped schema is JSON");
        jsonschema::validator_for(&schema).expect("shipped schema compiles")
    })
}

/// Checks a trace file against the schema, its artifacts and the loop
/// invariants. An empty list means the file is valid.
pub fn validate(path: &Path) -> Vec<String> {
    let raw = match fs::read(path) {
        Ok(raw) => raw,
        Err(e) => return vec![format!("cannot read {}: {e}", path.display())],
    };
    let value: serde_json::Value = match serde_json::from_slice(&raw) {
        Ok(v) => v,
        Err(e) => return vec![format!("not JSON: {e}")],
    };
    if let Err(e) = check_version(&value) {
        return vec![e.to_string()];
    }
    let mut violations: Vec<String> = schema_validator()
        .iter_errors(&value)
        .map(|e| format!("schema: {} at {}", e, e.instance_path))
        .collect();
    if !violations.is_empty() {
        return violations;
    }
    let file: TraceFile = match serde_json::from_value(value) {
        Ok(f) => f,
        Err(e) => return vec![format!("trace does not deserialize: {e}")],
    };
    let run_dir = path.parent().unwrap_or(Path::new("."));
    violations.extend(check_artifacts(&file, run_dir));
    violations.extend(check_invariants(&file.trace));
    violations
}

fn check_artifacts(file: &TraceFile, run_dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let prefix = Path::new(&file.artifact_dir);
    for image in referenced_images(&file.trace) {
        if !image.path.starts_with(prefix) {
            out.push(format!("image {} stored outside {}", image.digest, file.artifact_dir));
        }
        let full = run_dir.join(&image.path);
        match fs::read(&full) {
            Ok(bytes) => {
                let actual = digest_bytes(&bytes);
                if actual != image.digest {
                    out.push(format!(
                        "image {} at {} hashes to {actual}",
                        image.digest,
                        image.path.display()
                    ));
                }
            }
            Err(_) => out.push(format!("image {} missing at {}", image.digest, image.path.display())),
        }
    }
    out.sort();
    out.dedup();
    out
}

/// Loop invariants every recorded run must satisfy.
pub fn check_invariants(trace: &Trace) -> Vec<String> {
    let mut out = Vec::new();
    if trace.steps.len() > trace.config.t_max {
        out.push(format!("{} steps exceed t_max {}", trace.steps.len(), trace.config.t_max));
    }
    let mut prompt = trace.initial_prompt.as_str();
    let mut image = trace.initial_image.as_ref().map(|i| i.digest.as_str());
    for (i, step) in trace.steps.iter().enumerate() {
        let n = i + 1;
        if step.step != n || step.observation.step != n {
            out.push(format!("step {n} is numbered {}/{}", step.step, step.observation.step));
        }
        if step.decision.action == ActionKind::Stop {
            out.push(format!("step {n} executed STOP"));
        }
        if step.observation.action != step.decision.action {
            out.push(format!("step {n} observation action differs from decision"));
        }
        if step.prompt_before != prompt {
            out.push(format!("step {n} prompt_before does not continue the previous step"));
        }
        if step.image_before.as_deref() != image {
            out.push(format!("step {n} image_before does not continue the previous step"));
        }
        if matches!(
            step.decision.action,
            ActionKind::NaiveGeneration | ActionKind::ImageDetailRefinement | ActionKind::BestOfN
        ) && step.prompt_after != step.prompt_before
        {
            out.push(format!("step {n}: {} changed the prompt", step.decision.action));
        }
        let is_best_of_n = step.decision.action == ActionKind::BestOfN;
        if step.observation.candidate_scores.is_some() != is_best_of_n {
            out.push(format!("step {n}: candidate scores present iff best-of-N"));
        }
        if let Some(scores) = &step.observation.candidate_scores {
            if scores.len() != trace.config.best_of_n {
                out.push(format!("step {n}: {} candidate scores for N={}", scores.len(), trace.config.best_of_n));
            }
        }
        prompt = &step.prompt_after;
        image = step.image_after.as_ref().map(|i| i.digest.as_str());
    }
    if trace.final_prompt != prompt {
        out.push("final_prompt is not the last step's prompt".to_string());
    }
    if trace.final_image.as_ref().map(|i| i.digest.as_str()) != image {
        out.push("final_image is not the last step's image".to_string());
    }
    match &trace.terminal {
        Terminal::Stopped => match &trace.stop_decision {
            Some(d) if d.action == ActionKind::Stop => {}
            _ => out.push("terminal is stopped but no STOP decision was recorded".to_string()),
        },
        Terminal::MaxStepsReached => {
            if trace.steps.len() != trace.config.t_max {
                out.push("max_steps_reached with fewer than t_max steps".to_string());
            }
            if trace.stop_decision.is_some() {
                out.push("max_steps_reached but a STOP decision was recorded".to_string());
            }
        }
        Terminal::Aborted { .. } => {}
    }
    if trace.mode == Mode::Editing && trace.initial_image.is_none() {
        out.push("editing trace without an input image".to_string());
    }
    out
}

/// Re-runs a recorded trace against `backend`, forcing the recorded
/// decisions instead of consulting the controller.
pub fn replay(trace: &Trace, backend: &BackendHandle) -> Trace {
    let mut policy = ForcedPolicy::new(trace.decisions());
    let mut replayed = match (trace.mode, &trace.initial_image) {
        (Mode::Editing, Some(i0)) => {
            run_editing_with(&trace.config, backend, &trace.initial_prompt, i0.clone(), &mut policy)
        }
        _ => run_generation_with(&trace.config, backend, &trace.initial_prompt, &mut policy),
    };
    replayed.settings = trace.settings.clone();
    replayed
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDiff {
    /// 0 for run-level fields.
    pub step: usize,
    pub field: String,
    pub expected: String,
    pub actual: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceDiff {
    pub differences: Vec<FieldDiff>,
}

impl TraceDiff {
    pub fn is_identical(&self) -> bool {
        self.differences.is_empty()
    }
}

fn digest_of(image: Option<&ImageRef>) -> String {
    image.map_or_else(|| "-".to_string(), |i| i.digest.clone())
}

/// Structured comparison of the observable trajectory of two traces:
/// actions, prompts and image digests. Timings are ignored.
pub fn diff_traces(expected: &Trace, actual: &Trace) -> TraceDiff {
    let mut differences = Vec::new();
    let mut push = |step: usize, field: &str, e: String, a: String| {
        if e != a {
            differences.push(FieldDiff {
                step,
                field: field.to_string(),
                expected: e,
                actual: a,
            });
        }
    };
    push(0, "steps", expected.steps.len().to_string(), actual.steps.len().to_string());
    for (e, a) in expected.steps.iter().zip(&actual.steps) {
        push(e.step, "action", e.decision.action.to_string(), a.decision.action.to_string());
        push(e.step, "prompt_after", e.prompt_after.clone(), a.prompt_after.clone());
        push(e.step, "image_after", digest_of(e.image_after.as_ref()), digest_of(a.image_after.as_ref()));
    }
    push(0, "terminal", expected.terminal.label().to_string(), actual.terminal.label().to_string());
    push(0, "final_prompt", expected.final_prompt.clone(), actual.final_prompt.clone());
    push(
        0,
        "final_image",
        digest_of(expected.final_image.as_ref()),
        digest_of(actual.final_image.as_ref()),
    );
    TraceDiff { differences }
}
