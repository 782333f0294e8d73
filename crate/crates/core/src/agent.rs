//! The agent loop: ask the policy for an action, run it, fold the result
//! back into the state, until the policy says STOP or `t_max` actions ran.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::actions::{self, Observation};
use crate::backend::{BackendError, BackendHandle, BackendInfo, ImageRef};
use crate::policy::{action_mask, policy_template, ActionKind, ControllerPolicy, Decision, Policy};
use crate::templates;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Generation,
    Editing,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "generation" | "gen" => Ok(Mode::Generation),
            "editing" | "edit" => Ok(Mode::Editing),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunConfig {
    pub t_max: usize,
    pub best_of_n: usize,
    pub seed: u64,
    pub parse_retries: u32,
    /// Most recent observations shown verbatim to the controller.
    pub history_window: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            t_max: 5,
            best_of_n: 4,
            seed: 0,
            parse_retries: 2,
            history_window: 5,
        }
    }
}

impl RunConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        let invalid = |msg: &str| Err(AgentError::InvalidConfig(msg.to_string()));
        if self.t_max < 1 {
            return invalid("t_max must be at least 1");
        }
        if self.best_of_n < 1 {
            return invalid("best_of_n must be at least 1");
        }
        if self.history_window < 1 {
            return invalid("history_window must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub initial_prompt: String,
    pub initial_image: Option<ImageRef>,
    pub current_prompt: String,
    pub current_image: Option<ImageRef>,
    pub history: Vec<Observation>,
    /// 1-based index of the step about to be decided.
    pub step_index: usize,
    pub mode: Mode,
}

impl AgentState {
    pub fn generation(prompt: impl Into<String>) -> Self {
        let prompt = prompt.into();
        Self {
            initial_prompt: prompt.clone(),
            initial_image: None,
            current_prompt: prompt,
            current_image: None,
            history: Vec::new(),
            step_index: 1,
            mode: Mode::Generation,
        }
    }

    pub fn editing(prompt: impl Into<String>, image: ImageRef) -> Self {
        let prompt = prompt.into();
        Self {
            initial_prompt: prompt.clone(),
            initial_image: Some(image.clone()),
            current_prompt: prompt,
            current_image: Some(image),
            history: Vec::new(),
            step_index: 1,
            mode: Mode::Editing,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("action {action} is not permitted at step {step}")]
    MaskViolation { action: ActionKind, step: usize },
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error("unreadable input image: {0}")]
    UnreadableImage(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub decision: Decision,
    pub observation: Observation,
    pub prompt_before: String,
    pub prompt_after: String,
    pub image_before: Option<String>,
    pub image_after: Option<ImageRef>,
    /// Wall-clock time of the action; ignored by determinism checks.
    pub duration_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Terminal {
    Stopped,
    MaxStepsReached,
    Aborted { reason: String },
}

impl Terminal {
    pub fn label(&self) -> &'static str {
        match self {
            Terminal::Stopped => "stopped",
            Terminal::MaxStepsReached => "max_steps_reached",
            Terminal::Aborted { .. } => "aborted",
        }
    }

    pub fn is_aborted(&self) -> bool {
        matches!(self, Terminal::Aborted { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub config: RunConfig,
    pub mode: Mode,
    pub backend: BackendInfo,
    /// Ids of the prompt templates in effect.
    pub templates: Vec<String>,
    pub initial_prompt: String,
    pub initial_image: Option<ImageRef>,
    pub steps: Vec<StepRecord>,
    /// The STOP decision that ended the run, when there was one.
    pub stop_decision: Option<Decision>,
    pub terminal: Terminal,
    pub final_prompt: String,
    pub final_image: Option<ImageRef>,
    /// Effective front-end settings (secrets excluded).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub settings: BTreeMap<String, String>,
}

impl Trace {
    /// Copy with wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> Trace {
        let mut trace = self.clone();
        for step in &mut trace.steps {
            step.duration_ms = 0;
        }
        trace
    }

    /// Every decision the run took, the final STOP included.
    pub fn decisions(&self) -> Vec<Decision> {
        self.steps
            .iter()
            .map(|s| s.decision.clone())
            .chain(self.stop_decision.clone())
            .collect()
    }

    pub fn fallback_count(&self) -> usize {
        self.decisions().iter().filter(|d| d.fallback).count()
    }
}

/// Executes one non-STOP decision.
pub fn step(
    state: &AgentState,
    decision: &Decision,
    config: &RunConfig,
    backend: &BackendHandle,
) -> Result<(AgentState, Observation), AgentError> {
    if decision.action == ActionKind::Stop || !action_mask(state).contains(&decision.action) {
        return Err(AgentError::MaskViolation {
            action: decision.action,
            step: state.step_index,
        });
    }
    let outcome = actions::execute(decision.action, backend, state, config)?;
    let mut observation = outcome.observation;
    observation.rationale = decision.rationale.clone();

    let mut next = state.clone();
    next.current_prompt = outcome.new_prompt;
    next.current_image = outcome.new_image;
    next.history.push(observation.clone());
    next.step_index += 1;
    Ok((next, observation))
}

fn template_ids(mode: crate::agent::Mode) -> Vec<String> {
    std::iter::once(policy_template(mode).id)
        .chain([
            templates::ENHANCE.id,
            templates::REVISE.id,
            templates::REFINE.id,
            templates::JUDGE.id,
        ])
        .map(str::to_string)
        .collect()
}

fn empty_trace(config: &RunConfig, backend: &BackendHandle, mode: Mode, p0: &str, i0: Option<ImageRef>) -> Trace {
    Trace {
        config: config.clone(),
        mode,
        backend: backend.info(),
        templates: template_ids(mode),
        initial_prompt: p0.to_string(),
        initial_image: i0.clone(),
        steps: Vec::new(),
        stop_decision: None,
        terminal: Terminal::MaxStepsReached,
        final_prompt: p0.to_string(),
        final_image: i0,
        settings: BTreeMap::new(),
    }
}

fn aborted(mut trace: Trace, reason: impl Into<String>) -> Trace {
    trace.terminal = Terminal::Aborted { reason: reason.into() };
    trace
}

/// Runs the loop from `state` with decisions supplied by `policy`.
pub fn run_loop(
    config: &RunConfig,
    backend: &BackendHandle,
    mut state: AgentState,
    policy: &mut dyn Policy,
) -> Trace {
    let mut trace = empty_trace(config, backend, state.mode, &state.initial_prompt, state.initial_image.clone());
    if let Err(e) = config.validate() {
        return aborted(trace, e.to_string());
    }
    if state.initial_prompt.trim().is_empty() {
        return aborted(trace, "empty prompt");
    }

    for _ in 0..config.t_max {
        let decision = match policy.decide(&state, config, backend) {
            Ok(d) => d,
            Err(e) => {
                trace.terminal = Terminal::Aborted { reason: e.to_string() };
                break;
            }
        };
        if decision.action == ActionKind::Stop {
            trace.terminal = if state.current_image.is_some() {
                Terminal::Stopped
            } else {
                Terminal::Aborted {
                    reason: "stopped before any image was produced".to_string(),
                }
            };
            trace.stop_decision = Some(decision);
            break;
        }
        let started = Instant::now();
        match step(&state, &decision, config, backend) {
            Ok((next, observation)) => {
                trace.steps.push(StepRecord {
                    step: state.step_index,
                    decision,
                    observation,
                    prompt_before: state.current_prompt.clone(),
                    prompt_after: next.current_prompt.clone(),
                    image_before: state.current_image.as_ref().map(|i| i.digest.clone()),
                    image_after: next.current_image.clone(),
                    duration_ms: started.elapsed().as_millis() as u64,
                });
                state = next;
            }
            Err(e) => {
                trace.terminal = Terminal::Aborted { reason: e.to_string() };
                break;
            }
        }
    }
    trace.final_prompt = state.current_prompt;
    trace.final_image = state.current_image;
    trace
}

/// Image generation from a text prompt, steered by the model controller.
pub fn run_generation(config: &RunConfig, backend: &BackendHandle, p0: &str) -> Trace {
    run_generation_with(config, backend, p0, &mut ControllerPolicy)
}

pub fn run_generation_with(config: &RunConfig, backend: &BackendHandle, p0: &str, policy: &mut dyn Policy) -> Trace {
    run_loop(config, backend, AgentState::generation(p0), policy)
}

/// Image editing of `i0` following the instruction `p0`.
pub fn run_editing(config: &RunConfig, backend: &BackendHandle, p0: &str, i0: ImageRef) -> Trace {
    run_editing_with(config, backend, p0, i0, &mut ControllerPolicy)
}

pub fn run_editing_with(
    config: &RunConfig,
    backend: &BackendHandle,
    p0: &str,
    i0: ImageRef,
    policy: &mut dyn Policy,
) -> Trace {
    let reject = |reason: String| {
        aborted(
            empty_trace(config, backend, Mode::Editing, p0, Some(i0.clone())),
            reason,
        )
    };
    if let Err(e) = i0.require_bytes() {
        return reject(AgentError::UnreadableImage(e.to_string()).to_string());
    }
    if !backend.capabilities().supports_edit {
        return reject(BackendError::CapabilityMissing("edit".into()).to_string());
    }
    if let Err(e) = backend.store().ingest(&i0) {
        return reject(AgentError::UnreadableImage(e.to_string()).to_string());
    }
    run_loop(config, backend, AgentState::editing(p0, i0), policy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ArtifactStore, ImageFormat, SimWorldConfig};
    use crate::policy::ForcedPolicy;

    fn sim(noise: f64) -> BackendHandle {
        BackendHandle::simulated(SimWorldConfig::default().with_noise(noise), ArtifactStore::in_memory())
    }

    #[test]
    fn step_generates_first_image() {
        let backend = sim(0.0);
        let state = AgentState::generation("red cube");
        let decision = Decision::forced(ActionKind::NaiveGeneration, "start");
        let (next, obs) = step(&state, &decision, &RunConfig::default(), &backend).unwrap();
        assert!(next.current_image.is_some());
        assert_eq!(next.history.len(), 1);
        assert_eq!(next.step_index, 2);
        assert_eq!(obs.rationale, "start");
        assert_eq!(next.current_prompt, "red cube");
    }

    #[test]
    fn step_rejects_masked_action() {
        let backend = sim(0.0);
        let state = AgentState::generation("red cube");
        let decision = Decision::forced(ActionKind::PromptRevision, "x");
        let err = step(&state, &decision, &RunConfig::default(), &backend).unwrap_err();
        assert!(matches!(err, AgentError::MaskViolation { action: ActionKind::PromptRevision, step: 1 }));
    }

    #[test]
    fn step_rejects_stop() {
        let backend = sim(0.0);
        let mut state = AgentState::generation("red cube");
        state.current_image = Some(ImageRef::from_bytes(b"{\"attributes\":[]}".to_vec(), ImageFormat::SimJson));
        state.step_index = 2;
        let err = step(&state, &Decision::forced(ActionKind::Stop, ""), &RunConfig::default(), &backend).unwrap_err();
        assert!(matches!(err, AgentError::MaskViolation { .. }));
    }

    #[test]
    fn invalid_config_aborts() {
        let config = RunConfig {
            t_max: 0,
            ..RunConfig::default()
        };
        let trace = run_generation(&config, &sim(0.0), "red cube");
        assert!(trace.terminal.is_aborted());
        assert!(trace.steps.is_empty());
    }

    #[test]
    fn empty_prompt_aborts() {
        let trace = run_generation(&RunConfig::default(), &sim(0.0), "  ");
        assert!(trace.terminal.is_aborted());
    }

    #[test]
    fn forced_stop_without_image_aborts_generation() {
        let mut policy = ForcedPolicy::from_actions(&[ActionKind::Stop]);
        let trace = run_generation_with(&RunConfig::default(), &sim(0.0), "red cube", &mut policy);
        assert!(trace.terminal.is_aborted());
        assert!(trace.final_image.is_none());
        assert!(trace.stop_decision.is_some());
    }

    #[test]
    fn unreadable_edit_input_aborts() {
        let mut image = ImageRef::from_bytes(b"{\"attributes\":[]}".to_vec(), ImageFormat::SimJson);
        image = serde_json::from_value(serde_json::to_value(&image).unwrap()).unwrap();
        let trace = run_editing(&RunConfig::default(), &sim(0.0), "add a hat", image);
        assert!(trace.terminal.is_aborted());
        assert!(trace.steps.is_empty());
    }
}
