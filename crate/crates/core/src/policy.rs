//! The policy controller: renders the agent state into a controller prompt,
//! asks the understanding model for the next action and parses its reply.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agent::{AgentState, Mode, RunConfig};
use crate::backend::{BackendError, BackendHandle, ImageRef};
use crate::templates::{self, clip, one_line, Template};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    #[serde(rename = "naive_generation")]
    NaiveGeneration,
    #[serde(rename = "prompt_enhancement")]
    PromptEnhancement,
    #[serde(rename = "prompt_refinement")]
    PromptRevision,
    #[serde(rename = "image_detail_refinement")]
    ImageDetailRefinement,
    #[serde(rename = "best_of_N_sampling")]
    BestOfN,
    #[serde(rename = "STOP")]
    Stop,
}

/// Accepted spellings, as lowercase token sequences.
const ALIASES: &[(&[&str], ActionKind)] = &[
    (&["naive", "generation"], ActionKind::NaiveGeneration),
    (&["naive", "editing"], ActionKind::NaiveGeneration),
    (&["naive", "edit"], ActionKind::NaiveGeneration),
    (&["prompt", "enhancement"], ActionKind::PromptEnhancement),
    (&["prompt", "refinement"], ActionKind::PromptRevision),
    (&["prompt", "revision"], ActionKind::PromptRevision),
    (&["image", "detail", "refinement"], ActionKind::ImageDetailRefinement),
    (&["best", "of", "n", "sampling"], ActionKind::BestOfN),
    (&["best", "of", "n"], ActionKind::BestOfN),
    (&["stop"], ActionKind::Stop),
];

impl ActionKind {
    pub const ALL: [ActionKind; 6] = [
        ActionKind::NaiveGeneration,
        ActionKind::PromptEnhancement,
        ActionKind::PromptRevision,
        ActionKind::ImageDetailRefinement,
        ActionKind::BestOfN,
        ActionKind::Stop,
    ];

    pub fn wire_name(self) -> &'static str {
        match self {
            ActionKind::NaiveGeneration => "naive_generation",
            ActionKind::PromptEnhancement => "prompt_enhancement",
            ActionKind::PromptRevision => "prompt_refinement",
            ActionKind::ImageDetailRefinement => "image_detail_refinement",
            ActionKind::BestOfN => "best_of_N_sampling",
            ActionKind::Stop => "STOP",
        }
    }

    fn definition(self) -> &'static str {
        match self {
            ActionKind::NaiveGeneration => {
                "generate (or edit) once from the current prompt; best when the request is simple and explicit"
            }
            ActionKind::PromptEnhancement => {
                "rewrite the prompt with step-by-step reasoning into a more explicit description, then generate from it"
            }
            ActionKind::PromptRevision => {
                "analyze the current image against the intended meaning, revise the prompt to close the gap, then regenerate"
            }
            ActionKind::ImageDetailRefinement => {
                "keep the prompt and edit the current image to fix local imperfections"
            }
            ActionKind::BestOfN => {
                "sample several candidates from the current prompt and keep the one judged most aligned"
            }
            ActionKind::Stop => "the current image is satisfactory; finish",
        }
    }

    /// Whether the action reads the current image.
    pub fn needs_image(self) -> bool {
        matches!(
            self,
            ActionKind::PromptRevision | ActionKind::ImageDetailRefinement | ActionKind::Stop
        )
    }

    /// Parses a single action name, tolerant of case and of `_`, `\_`,
    /// `$\_$`, space and hyphen separators.
    pub fn from_wire(name: &str) -> Option<Self> {
        let tokens = tokenize(name);
        ALIASES
            .iter()
            .find(|(alias, _)| tokens.iter().map(String::as_str).eq(alias.iter().copied()))
            .map(|(_, kind)| *kind)
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

impl std::str::FromStr for ActionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_wire(s).ok_or_else(|| format!("unknown action {s:?}"))
    }
}

fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub type ActionMask = BTreeSet<ActionKind>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub action: ActionKind,
    pub rationale: String,
    pub raw: String,
    pub parse_attempts: u32,
    /// Set when the controller's replies were unusable and the fallback
    /// rule picked the action.
    #[serde(default)]
    pub fallback: bool,
}

impl Decision {
    /// A decision that did not come from a model (scripted, replayed or
    /// sampled by a baseline policy).
    pub fn forced(action: ActionKind, rationale: impl Into<String>) -> Self {
        Self {
            action,
            rationale: rationale.into(),
            raw: String::new(),
            parse_attempts: 0,
            fallback: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("reply names no known action")]
    NoAction,
    #[error("action {0} is not permitted in the current state")]
    MaskedAction(ActionKind),
}

/// Actions the controller may choose in `state`.
pub fn action_mask(state: &AgentState) -> ActionMask {
    let all: ActionMask = ActionKind::ALL.into_iter().collect();
    if state.mode == Mode::Editing && state.step_index == 1 {
        let mut mask = all;
        mask.remove(&ActionKind::Stop);
        mask
    } else if state.current_image.is_none() {
        [
            ActionKind::NaiveGeneration,
            ActionKind::PromptEnhancement,
            ActionKind::BestOfN,
        ]
        .into_iter()
        .collect()
    } else {
        all
    }
}

const MAX_PROMPT_FIELD: usize = 2000;
const MAX_HISTORY_LINE: usize = 1200;
const MAX_SUMMARIZED_NAMES: usize = 32;
pub const NO_HISTORY: &str = "no actions taken yet";

pub fn policy_template(mode: Mode) -> Template {
    match mode {
        Mode::Generation => templates::POLICY_GENERATION,
        Mode::Editing => templates::POLICY_EDITING,
    }
}

/// Upper bound on the length (in chars) of any controller prompt built under
/// `config`, whatever the history length.
pub fn prompt_ceiling(config: &RunConfig) -> usize {
    let template = templates::POLICY_GENERATION
        .body
        .len()
        .max(templates::POLICY_EDITING.body.len());
    let actions: usize = ActionKind::ALL
        .iter()
        .map(|a| a.wire_name().len() + a.definition().len() + 8)
        .sum();
    let summary = 64 + MAX_SUMMARIZED_NAMES * 26;
    template + 2 * MAX_PROMPT_FIELD + 128 + actions + summary + config.history_window * (MAX_HISTORY_LINE + 1)
}

fn render_observation(obs: &crate::actions::Observation) -> String {
    let mut line = format!(
        "Step {}: {} | reason: {} | feedback: {}",
        obs.step,
        obs.action,
        one_line(&obs.rationale),
        one_line(&obs.feedback)
    );
    if let Some(score) = obs.score {
        line.push_str(&format!(" | score: {score:.2}"));
    }
    if let Some(candidates) = &obs.candidate_scores {
        let rendered: Vec<String> = candidates
            .iter()
            .map(|c| c.map_or_else(|| "failed".to_string(), |s| format!("{s:.2}")))
            .collect();
        line.push_str(&format!(" | candidates: {}", rendered.join(" ")));
    }
    if let Some(failure) = &obs.failure {
        line.push_str(&format!(" | failed: {}", one_line(failure)));
    }
    clip(&line, MAX_HISTORY_LINE)
}

fn render_history(state: &AgentState, window: usize) -> String {
    if state.history.is_empty() {
        return NO_HISTORY.to_string();
    }
    let split = state.history.len().saturating_sub(window);
    let (older, recent) = state.history.split_at(split);
    let mut lines = Vec::with_capacity(recent.len() + 1);
    if !older.is_empty() {
        let mut names: Vec<&str> = older
            .iter()
            .take(MAX_SUMMARIZED_NAMES)
            .map(|o| o.action.wire_name())
            .collect();
        let extra = older.len().saturating_sub(MAX_SUMMARIZED_NAMES);
        let more = format!("(+{extra} more)");
        if extra > 0 {
            names.push(&more);
        }
        lines.push(format!(
            "Earlier steps {}-{}: {}",
            older[0].step,
            older[older.len() - 1].step,
            names.join(", ")
        ));
    }
    lines.extend(recent.iter().map(render_observation));
    lines.join("\n")
}

/// Deterministic controller prompt for `state`.
pub fn build_policy_prompt(state: &AgentState, config: &RunConfig) -> String {
    let mask = action_mask(state);
    let actions = mask
        .iter()
        .map(|a| format!("- {}: {}", a.wire_name(), a.definition()))
        .collect::<Vec<_>>()
        .join("\n");
    let step = state.step_index.to_string();
    let t_max = config.t_max.to_string();
    let initial = clip(&one_line(&state.initial_prompt), MAX_PROMPT_FIELD);
    let current = clip(&one_line(&state.current_prompt), MAX_PROMPT_FIELD);
    let current_image = if state.current_image.is_some() {
        "attached (image 1)"
    } else {
        "none yet"
    };
    let initial_image = match (&state.initial_image, &state.current_image) {
        (Some(_), Some(_)) => "attached (image 2)",
        (Some(_), None) => "attached (image 1)",
        (None, _) => "none",
    };
    let history = render_history(state, config.history_window);
    policy_template(state.mode).render(&[
        ("step", &step),
        ("t_max", &t_max),
        ("initial_prompt", &initial),
        ("current_prompt", &current),
        ("current_image", current_image),
        ("initial_image", initial_image),
        ("history", &history),
        ("actions", &actions),
    ])
}

/// Images attached to the controller call: the current image, then the
/// editing input.
pub fn policy_images(state: &AgentState) -> Vec<ImageRef> {
    let mut images = Vec::with_capacity(2);
    images.extend(state.current_image.clone());
    if state.mode == Mode::Editing {
        images.extend(state.initial_image.clone());
    }
    images
}

const MAX_SCAN_BYTES: usize = 64 * 1024;
const MAX_RATIONALE: usize = 600;

fn floor_char_boundary(s: &str, mut idx: usize) -> usize {
    idx = idx.min(s.len());
    while !s.is_char_boundary(idx) {
        idx -= 1;
    }
    idx
}

/// First JSON object in `raw` carrying an `"action"` string that names a
/// known action, along with its reason field.
fn json_decision(raw: &str) -> Option<(ActionKind, String)> {
    for (pos, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[pos..]).into_iter::<serde_json::Value>();
        let Some(Ok(serde_json::Value::Object(map))) = stream.next() else {
            continue;
        };
        let Some(action) = map.get("action").and_then(|a| a.as_str()) else {
            continue;
        };
        if let Some(kind) = ActionKind::from_wire(action) {
            let reason = ["reason", "rationale"]
                .iter()
                .find_map(|k| map.get(*k).and_then(|v| v.as_str()))
                .unwrap_or_default()
                .trim()
                .to_string();
            return Some((kind, reason));
        }
    }
    None
}

/// Earliest action name mentioned anywhere in `raw`; the longest alias wins
/// when two start at the same token.
fn scanned_decision(raw: &str) -> Option<ActionKind> {
    let tokens = tokenize(raw);
    for start in 0..tokens.len() {
        let hit = ALIASES
            .iter()
            .filter(|(alias, _)| {
                tokens.len() - start >= alias.len()
                    && alias.iter().zip(&tokens[start..]).all(|(a, t)| *a == t)
            })
            .max_by_key(|(alias, _)| alias.len());
        if let Some((_, kind)) = hit {
            return Some(*kind);
        }
    }
    None
}

/// Extracts a decision from a raw controller reply.
///
/// A JSON object with an `"action"` key takes precedence; otherwise the
/// earliest action name found in the text is used.
pub fn parse_decision(raw: &str, mask: &ActionMask) -> Result<Decision, ParseError> {
    let scan = &raw[..floor_char_boundary(raw, MAX_SCAN_BYTES)];
    let (action, reason) = match json_decision(scan) {
        Some(found) => found,
        None => (scanned_decision(scan).ok_or(ParseError::NoAction)?, String::new()),
    };
    if !mask.contains(&action) {
        return Err(ParseError::MaskedAction(action));
    }
    let rationale = if reason.is_empty() {
        clip(&one_line(scan), MAX_RATIONALE)
    } else {
        clip(&reason, MAX_RATIONALE)
    };
    Ok(Decision {
        action,
        rationale,
        raw: raw.to_string(),
        parse_attempts: 1,
        fallback: false,
    })
}

/// Action used when every controller reply failed to parse.
pub fn fallback_action(state: &AgentState, mask: &ActionMask) -> ActionKind {
    if state.current_image.is_some() && mask.contains(&ActionKind::Stop) {
        ActionKind::Stop
    } else {
        ActionKind::NaiveGeneration
    }
}

/// Queries the controller, retrying unparseable replies up to
/// `config.parse_retries` times before falling back.
pub fn decide(backend: &BackendHandle, state: &AgentState, config: &RunConfig) -> Result<Decision, BackendError> {
    let mask = action_mask(state);
    let prompt = build_policy_prompt(state, config);
    let images = policy_images(state);
    let template = policy_template(state.mode);
    let attempts = config.parse_retries + 1;

    let mut text = prompt.clone();
    let mut last_raw = String::new();
    for attempt in 1..=attempts {
        let raw = backend.understand(template.id, &text, &images)?;
        match parse_decision(&raw, &mask) {
            Ok(mut decision) => {
                decision.parse_attempts = attempt;
                return Ok(decision);
            }
            Err(err) => {
                let permitted: Vec<&str> = mask.iter().map(|a| a.wire_name()).collect();
                text = format!(
                    "{prompt}\n\nYour previous reply could not be used ({err}). Reply with only a JSON object whose \"action\" is one of: {}.",
                    permitted.join(", ")
                );
                last_raw = raw;
            }
        }
    }
    Ok(Decision {
        action: fallback_action(state, &mask),
        rationale: String::new(),
        raw: last_raw,
        parse_attempts: attempts,
        fallback: true,
    })
}

/// Source of decisions for the agent loop.
pub trait Policy {
    fn decide(
        &mut self,
        state: &AgentState,
        config: &RunConfig,
        backend: &BackendHandle,
    ) -> Result<Decision, BackendError>;
}

/// The model-driven controller.
#[derive(Debug, Default, Clone, Copy)]
pub struct ControllerPolicy;

impl Policy for ControllerPolicy {
    fn decide(&mut self, state: &AgentState, config: &RunConfig, backend: &BackendHandle) -> Result<Decision, BackendError> {
        decide(backend, state, config)
    }
}

/// Replays a fixed decision sequence, then stops.
#[derive(Debug, Clone)]
pub struct ForcedPolicy {
    decisions: std::vec::IntoIter<Decision>,
}

impl ForcedPolicy {
    pub fn new(decisions: Vec<Decision>) -> Self {
        Self {
            decisions: decisions.into_iter(),
        }
    }

    pub fn from_actions(actions: &[ActionKind]) -> Self {
        Self::new(
            actions
                .iter()
                .map(|a| Decision::forced(*a, "scripted"))
                .collect(),
        )
    }
}

impl Policy for ForcedPolicy {
    fn decide(&mut self, _: &AgentState, _: &RunConfig, _: &BackendHandle) -> Result<Decision, BackendError> {
        Ok(self
            .decisions
            .next()
            .unwrap_or_else(|| Decision::forced(ActionKind::Stop, "decision sequence exhausted")))
    }
}
