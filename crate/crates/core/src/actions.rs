//! Action functions. Each takes the current state and returns the next
//! prompt, the next image and one observation for the history.

use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentState, Mode, RunConfig};
use crate::backend::{BackendError, BackendHandle, ImageRef};
use crate::policy::ActionKind;
use crate::seed::step_seed;
use crate::templates::{self, one_line};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub step: usize,
    pub action: ActionKind,
    pub rationale: String,
    pub feedback: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    /// One entry per best-of-N candidate; `None` marks a failed candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_scores: Option<Vec<Option<f64>>>,
    /// Set when the action could not do its job and left the state as is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Observation {
    fn new(state: &AgentState, action: ActionKind, feedback: impl Into<String>) -> Self {
        Self {
            step: state.step_index,
            action,
            rationale: String::new(),
            feedback: feedback.into(),
            score: None,
            candidate_scores: None,
            failure: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionOutcome {
    pub new_prompt: String,
    pub new_image: Option<ImageRef>,
    pub observation: Observation,
}

impl ActionOutcome {
    /// Outcome that leaves prompt and image untouched and records why.
    fn no_op(state: &AgentState, action: ActionKind, failure: impl Into<String>) -> Self {
        let failure = failure.into();
        let mut observation = Observation::new(state, action, format!("no change: {failure}"));
        observation.failure = Some(failure);
        Self {
            new_prompt: state.current_prompt.clone(),
            new_image: state.current_image.clone(),
            observation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub index: usize,
    pub score: f64,
    pub critique: String,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("could not read a score from judge reply {0:?}")]
    ScoreParse(String),
}

fn seed_for(config: &RunConfig, state: &AgentState, candidate: usize) -> u64 {
    step_seed(config.seed, state.step_index, candidate)
}

/// Produces an image from `prompt`: generation from scratch, or an edit of
/// the current image (the input image when nothing has been produced yet).
fn render_image(
    backend: &BackendHandle,
    state: &AgentState,
    prompt: &str,
    seed: u64,
) -> Result<ImageRef, BackendError> {
    match state.mode {
        Mode::Generation => backend.generate(prompt, seed),
        Mode::Editing => {
            let base = state
                .current_image
                .as_ref()
                .or(state.initial_image.as_ref())
                .ok_or_else(|| BackendError::BadRequest("editing run without an image".into()))?;
            backend.edit(prompt, base, seed)
        }
    }
}

fn require_image(state: &AgentState, action: ActionKind) -> Result<&ImageRef, BackendError> {
    state
        .current_image
        .as_ref()
        .ok_or_else(|| BackendError::BadRequest(format!("{action} requires a current image")))
}

pub fn naive(backend: &BackendHandle, state: &AgentState, config: &RunConfig) -> Result<ActionOutcome, BackendError> {
    let image = render_image(backend, state, &state.current_prompt, seed_for(config, state, 0))?;
    Ok(ActionOutcome {
        new_prompt: state.current_prompt.clone(),
        new_image: Some(image),
        observation: Observation::new(state, ActionKind::NaiveGeneration, "naive invocation"),
    })
}

/// Chain-of-thought enhancement: rewrite the prompt, then generate from the
/// rewritten prompt.
pub fn enhance_prompt_cot(
    backend: &BackendHandle,
    state: &AgentState,
    config: &RunConfig,
) -> Result<ActionOutcome, BackendError> {
    let text = templates::ENHANCE.render(&[
        ("initial_prompt", &one_line(&state.initial_prompt)),
        ("current_prompt", &one_line(&state.current_prompt)),
    ]);
    let enhanced = one_line(&backend.understand(templates::ENHANCE.id, &text, &[])?);
    if enhanced.is_empty() {
        return Ok(ActionOutcome::no_op(
            state,
            ActionKind::PromptEnhancement,
            "enhancement returned an empty prompt",
        ));
    }
    let image = render_image(backend, state, &enhanced, seed_for(config, state, 0))?;
    let feedback = format!("prompt enhanced from {:?} to {:?}", state.current_prompt, enhanced);
    Ok(ActionOutcome {
        new_prompt: enhanced,
        new_image: Some(image),
        observation: Observation::new(state, ActionKind::PromptEnhancement, feedback),
    })
}

/// Parsed reply of the revision template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Revision {
    pub summary: String,
    pub discrepancies: String,
    pub revised_prompt: String,
}

fn find_label(text: &str, label: &str) -> Option<(usize, usize)> {
    let lower = text.to_ascii_lowercase();
    let start = lower.find(&label.to_ascii_lowercase())?;
    Some((start, start + label.len()))
}

/// Splits a revision reply into summary, discrepancies and revised prompt.
/// Returns `None` when the revised-prompt section is missing or empty.
pub fn parse_revision(reply: &str) -> Option<Revision> {
    let (marker_start, marker_end) = find_label(reply, "REVISED PROMPT:")?;
    let revised_prompt = one_line(&reply[marker_end..]);
    if revised_prompt.is_empty() {
        return None;
    }
    let head = &reply[..marker_start];
    let section = |label: &str, until: Option<&str>| -> String {
        let Some((_, from)) = find_label(head, label) else {
            return String::new();
        };
        let body = &head[from..];
        let body = match until.and_then(|u| find_label(body, u)) {
            Some((to, _)) => &body[..to],
            None => body,
        };
        one_line(body)
    };
    let summary = section("IMAGE SUMMARY:", Some("DISCREPANCIES:"));
    let mut discrepancies = section("DISCREPANCIES:", None);
    if discrepancies.trim_end_matches('.').eq_ignore_ascii_case("none") {
        discrepancies.clear();
    }
    Some(Revision {
        summary,
        discrepancies,
        revised_prompt,
    })
}

/// Image-grounded prompt revision: summarize the image, list its gaps
/// against the intended prompt, rewrite the prompt, regenerate.
pub fn revise_prompt(backend: &BackendHandle, state: &AgentState, config: &RunConfig) -> Result<ActionOutcome, BackendError> {
    let current = require_image(state, ActionKind::PromptRevision)?;
    let text = templates::REVISE.render(&[
        ("initial_prompt", &one_line(&state.initial_prompt)),
        ("current_prompt", &one_line(&state.current_prompt)),
    ]);
    let images = std::slice::from_ref(current);
    let mut revision = parse_revision(&backend.understand(templates::REVISE.id, &text, images)?);
    if revision.is_none() {
        let retry = format!("{text}\n\nYour previous reply lacked the REVISED PROMPT: line. Use the exact layout above.");
        revision = parse_revision(&backend.understand(templates::REVISE.id, &retry, images)?);
    }
    let Some(revision) = revision else {
        return Ok(ActionOutcome::no_op(
            state,
            ActionKind::PromptRevision,
            "revision reply had no revised prompt",
        ));
    };
    let image = render_image(backend, state, &revision.revised_prompt, seed_for(config, state, 0))?;
    Ok(ActionOutcome {
        new_prompt: revision.revised_prompt,
        new_image: Some(image),
        observation: Observation::new(state, ActionKind::PromptRevision, revision.discrepancies),
    })
}

/// Detail refinement: derive an editing instruction from (prompt, image)
/// and apply it to the image. The prompt never changes.
pub fn refine_image_details(
    backend: &BackendHandle,
    state: &AgentState,
    config: &RunConfig,
) -> Result<ActionOutcome, BackendError> {
    let current = require_image(state, ActionKind::ImageDetailRefinement)?;
    let text = templates::REFINE.render(&[("current_prompt", &one_line(&state.current_prompt))]);
    let instruction = one_line(&backend.understand(templates::REFINE.id, &text, std::slice::from_ref(current))?);
    if instruction.is_empty() {
        return Ok(ActionOutcome::no_op(
            state,
            ActionKind::ImageDetailRefinement,
            "refinement produced no editing instruction",
        ));
    }
    let image = backend.edit(&instruction, current, seed_for(config, state, 0))?;
    Ok(ActionOutcome {
        new_prompt: state.current_prompt.clone(),
        new_image: Some(image),
        observation: Observation::new(state, ActionKind::ImageDetailRefinement, instruction),
    })
}

/// Index of the best score; ties resolve to the lowest index.
pub fn select_best(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (index, score) in scores.iter().enumerate() {
        if let Some(score) = *score {
            if best.is_none_or(|(_, b)| score > b) {
                best = Some((index, score));
            }
        }
    }
    best.map(|(index, _)| index)
}

/// Samples `n` candidates from the current prompt, scores each against it
/// and keeps the highest-scoring one.
pub fn best_of_n(
    backend: &BackendHandle,
    state: &AgentState,
    config: &RunConfig,
    n: usize,
) -> Result<ActionOutcome, BackendError> {
    if n == 0 {
        return Err(BackendError::BadRequest("best-of-N needs at least one candidate".into()));
    }
    let candidates: Vec<Result<(ImageRef, CandidateScore), String>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let image = render_image(backend, state, &state.current_prompt, seed_for(config, state, k))
                .map_err(|e| e.to_string())?;
            let mut score =
                evaluate_alignment(backend, &state.current_prompt, &image).map_err(|e| e.to_string())?;
            score.index = k;
            Ok((image, score))
        })
        .collect();

    let scores: Vec<Option<f64>> = candidates
        .iter()
        .map(|c| c.as_ref().ok().map(|(_, s)| s.score))
        .collect();
    let Some(best) = select_best(&scores) else {
        let first_error = candidates
            .iter()
            .find_map(|c| c.as_ref().err().cloned())
            .unwrap_or_default();
        let mut outcome =
            ActionOutcome::no_op(state, ActionKind::BestOfN, format!("all {n} candidates failed: {first_error}"));
        outcome.observation.candidate_scores = Some(scores);
        return Ok(outcome);
    };
    let (image, chosen) = candidates[best].as_ref().expect("selected candidate succeeded");
    let failed = scores.iter().filter(|s| s.is_none()).count();
    let mut feedback = format!(
        "selected candidate {} of {n} (score {:.2}): {}",
        best, chosen.score, chosen.critique
    );
    if failed > 0 {
        feedback.push_str(&format!("; {failed} candidate(s) failed"));
    }
    let mut observation = Observation::new(state, ActionKind::BestOfN, feedback);
    observation.score = Some(chosen.score);
    observation.candidate_scores = Some(scores);
    Ok(ActionOutcome {
        new_prompt: state.current_prompt.clone(),
        new_image: Some(image.clone()),
        observation,
    })
}

fn labelled_score_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)\bscore\b\s*[:=]?\s*(\d+(?:\.\d+)?)(?:\s*/\s*(\d+(?:\.\d+)?))?").expect("valid regex")
    })
}

fn bare_score_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(\d+(?:\.\d+)?)(?:\s*/\s*(\d+(?:\.\d+)?))?").expect("valid regex"))
}

/// Reads a judge reply. `Score: 8` is on the 0-10 scale (0.8); `Score: 3/4`
/// is a proportion (0.75). Returns the normalized score and the critique.
pub fn parse_judge_reply(reply: &str) -> Result<(f64, String), EvalError> {
    let caps = labelled_score_re()
        .captures(reply)
        .or_else(|| bare_score_re().captures(reply))
        .ok_or_else(|| EvalError::ScoreParse(reply.to_string()))?;
    let bad = || EvalError::ScoreParse(reply.to_string());
    let value: f64 = caps[1].parse().map_err(|_| bad())?;
    let score = match caps.get(2) {
        Some(denominator) => {
            let denominator: f64 = denominator.as_str().parse().map_err(|_| bad())?;
            if denominator <= 0.0 {
                return Err(bad());
            }
            value / denominator
        }
        None => value / 10.0,
    };
    if !(0.0..=1.0).contains(&score) {
        return Err(bad());
    }
    let rest = &reply[caps.get(0).expect("whole match").end()..];
    let critique = rest
        .trim_start_matches(|c: char| c.is_whitespace() || "—–-:,.|".contains(c))
        .lines()
        .next()
        .unwrap_or_default()
        .trim()
        .to_string();
    Ok((score, critique))
}

/// Asks the judge how well `image` matches `prompt`.
pub fn evaluate_alignment(backend: &BackendHandle, prompt: &str, image: &ImageRef) -> Result<CandidateScore, EvalError> {
    let text = templates::JUDGE.render(&[("prompt", &one_line(prompt))]);
    let reply = backend.understand(templates::JUDGE.id, &text, std::slice::from_ref(image))?;
    let (score, critique) = parse_judge_reply(&reply)?;
    Ok(CandidateScore {
        index: 0,
        score,
        critique,
    })
}

/// Dispatches to the action function for `action`.
pub fn execute(
    action: ActionKind,
    backend: &BackendHandle,
    state: &AgentState,
    config: &RunConfig,
) -> Result<ActionOutcome, BackendError> {
    match action {
        ActionKind::NaiveGeneration => naive(backend, state, config),
        ActionKind::PromptEnhancement => enhance_prompt_cot(backend, state, config),
        ActionKind::PromptRevision => revise_prompt(backend, state, config),
        ActionKind::ImageDetailRefinement => refine_image_details(backend, state, config),
        ActionKind::BestOfN => best_of_n(backend, state, config, config.best_of_n),
        ActionKind::Stop => Err(BackendError::BadRequest("STOP is not an executable action".into())),
    }
}
