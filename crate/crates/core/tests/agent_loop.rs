mod common;

use common::{noiseless, oracle_attributes, sim, sim_image, vocabulary};
use imagent::agent::{
    run_editing, run_editing_with, run_generation, step, AgentError, AgentState, Mode, RunConfig, Terminal,
};
use imagent::backend::{ArtifactStore, BackendHandle, SimWorldConfig};
use imagent::policy::{
    action_mask, build_policy_prompt, decide, parse_decision, ActionKind, Decision, ForcedPolicy, ParseError,
};

fn scripted(entries: &[&str]) -> BackendHandle {
    sim(SimWorldConfig::default().with_script(entries.iter().copied()))
}

#[test]
fn naive_then_stop_executes_one_step() {
    let backend = scripted(&["naive_generation", "STOP"]);
    let trace = run_generation(&RunConfig::default(), &backend, "a red cube");
    assert_eq!(trace.steps.len(), 1);
    assert_eq!(trace.terminal, Terminal::Stopped);
    assert_eq!(trace.final_image, trace.steps[0].image_after);
    assert_eq!(trace.stop_decision.as_ref().unwrap().action, ActionKind::Stop);
}

#[test]
fn controller_that_never_stops_hits_the_step_budget() {
    let backend = scripted(&["naive_generation"; 5]);
    let config = RunConfig::default();
    assert_eq!(config.t_max, 5);
    let trace = run_generation(&config, &backend, "a red cube");
    assert_eq!(trace.steps.len(), 5);
    assert_eq!(trace.terminal, Terminal::MaxStepsReached);
    assert!(trace.stop_decision.is_none());
}

#[test]
fn seeded_runs_serialize_identically() {
    let world = SimWorldConfig::default().with_noise(0.5);
    let config = RunConfig::default().with_seed(99);
    let prompt = "a giant furry cat wearing a golden hat beside a wooden table";
    let a = run_generation(&config, &sim(world.clone()), prompt).without_timings();
    let b = run_generation(&config, &sim(world), prompt).without_timings();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(!a.steps.is_empty());
}

#[test]
fn editing_stop_at_first_step_returns_input_unchanged() {
    let backend = noiseless();
    let i0 = sim_image(&["cat"]);
    let mut policy = ForcedPolicy::from_actions(&[ActionKind::Stop]);
    let trace = run_editing_with(&RunConfig::default(), &backend, "give the cat a red hat", i0.clone(), &mut policy);
    assert!(trace.steps.is_empty());
    assert_eq!(trace.terminal, Terminal::Stopped);
    assert_eq!(trace.final_image.as_ref().unwrap().digest, i0.digest);
}

#[test]
fn scripted_controller_cannot_stop_an_edit_before_it_starts() {
    let backend = scripted(&["STOP", "STOP"]);
    let trace = run_editing(&RunConfig::default(), &backend, "give the cat a red hat", sim_image(&["cat"]));
    assert_eq!(trace.steps.len(), 1);
    let first = &trace.steps[0].decision;
    assert!(first.fallback);
    assert_eq!(first.action, ActionKind::NaiveGeneration);
    assert_eq!(first.parse_attempts, 1 + RunConfig::default().parse_retries);
    assert_eq!(trace.terminal, Terminal::Stopped);
}

#[test]
fn repeated_naive_edits_change_the_image_each_time() {
    let backend = scripted(&["naive_edit"; 5]);
    let i0 = sim_image(&["cat"]);
    let prompt = "cat with red hat, blue cube, green tree, wooden table and golden lamp";
    let trace = run_editing(&RunConfig::default(), &backend, prompt, i0.clone());
    assert_eq!(trace.steps.len(), 5);
    let mut previous = i0.digest.clone();
    for s in &trace.steps {
        assert_eq!(s.decision.action, ActionKind::NaiveGeneration);
        let digest = s.image_after.as_ref().unwrap().digest.clone();
        assert_ne!(digest, previous, "step {}", s.step);
        previous = digest;
    }
}

#[test]
fn refinement_then_stop_keeps_prompt_and_changes_image() {
    let backend = scripted(&["image_detail_refinement", "STOP"]);
    let i0 = sim_image(&["bread"]);
    let trace = run_editing(&RunConfig::default(), &backend, "moldy bread", i0.clone());
    assert_eq!(trace.steps.len(), 1);
    assert_eq!(trace.final_prompt, "moldy bread");
    assert_ne!(trace.final_image.as_ref().unwrap().digest, i0.digest);
    let attrs = oracle_attributes(trace.final_image.as_ref().unwrap());
    assert!(attrs.contains("moldy") && attrs.contains("bread"));
}

#[test]
fn editing_needs_an_edit_capable_backend() {
    let world = SimWorldConfig {
        supports_edit: false,
        ..SimWorldConfig::default()
    };
    let trace = run_editing(&RunConfig::default(), &sim(world), "add a hat", sim_image(&["cat"]));
    assert!(trace.terminal.is_aborted());
    assert!(trace.steps.is_empty());
}

#[test]
fn step_from_empty_state_produces_an_image() {
    let backend = noiseless();
    let state = AgentState::generation("a red cube");
    let (next, _) = step(&state, &Decision::forced(ActionKind::NaiveGeneration, "go"), &RunConfig::default(), &backend)
        .unwrap();
    assert!(next.current_image.is_some());
    assert_eq!(next.history.len(), 1);
    assert_eq!(next.step_index, 2);
}

#[test]
fn enhancement_step_replaces_prompt_and_image() {
    let backend = noiseless();
    let config = RunConfig::default();
    let state = AgentState::generation("a red cube");
    let (state, _) = step(&state, &Decision::forced(ActionKind::NaiveGeneration, ""), &config, &backend).unwrap();
    let (next, obs) = step(&state, &Decision::forced(ActionKind::PromptEnhancement, ""), &config, &backend).unwrap();
    assert_ne!(next.current_prompt, state.current_prompt);
    assert!(next.current_prompt.starts_with("a red cube"));
    assert!(obs.failure.is_none());
    let expected = backend.generate(&next.current_prompt, imagent::seed::step_seed(config.seed, 2, 0)).unwrap();
    assert_eq!(next.current_image.as_ref().unwrap().digest, expected.digest);
}

#[test]
fn revision_without_image_is_a_mask_violation() {
    let backend = noiseless();
    let state = AgentState::generation("a red cube");
    let err = step(&state, &Decision::forced(ActionKind::PromptRevision, ""), &RunConfig::default(), &backend)
        .unwrap_err();
    assert!(matches!(err, AgentError::MaskViolation { action: ActionKind::PromptRevision, step: 1 }));
}

#[test]
fn masks_follow_state() {
    let generation = AgentState::generation("x");
    let mask = action_mask(&generation);
    for absent in [ActionKind::PromptRevision, ActionKind::ImageDetailRefinement, ActionKind::Stop] {
        assert!(!mask.contains(&absent));
    }
    assert_eq!(mask.len(), 3);

    let editing = AgentState::editing("x", sim_image(&["cat"]));
    let mask = action_mask(&editing);
    assert_eq!(mask.len(), 5);
    assert!(!mask.contains(&ActionKind::Stop));

    let backend = noiseless();
    let config = RunConfig::default();
    let mut state = generation;
    for action in [ActionKind::NaiveGeneration, ActionKind::BestOfN] {
        state = step(&state, &Decision::forced(action, ""), &config, &backend).unwrap().0;
    }
    assert_eq!(state.step_index, 3);
    assert_eq!(action_mask(&state).len(), ActionKind::ALL.len());
}

#[test]
fn policy_prompt_lists_only_permitted_actions() {
    let state = AgentState::generation("a red cube");
    let prompt = build_policy_prompt(&state, &RunConfig::default());
    assert!(prompt.contains("no actions taken yet"));
    assert!(prompt.contains("naive_generation"));
    assert!(!prompt.contains("image_detail_refinement"));
    assert!(!prompt.contains("prompt_refinement"));
    assert_eq!(prompt, build_policy_prompt(&state, &RunConfig::default()));
}

#[test]
fn history_window_summarizes_older_steps() {
    let backend = noiseless();
    let config = RunConfig {
        t_max: 10,
        ..RunConfig::default()
    };
    let mut state = AgentState::generation("a red cube");
    let plan = [
        ActionKind::NaiveGeneration,
        ActionKind::PromptEnhancement,
        ActionKind::NaiveGeneration,
        ActionKind::ImageDetailRefinement,
        ActionKind::NaiveGeneration,
        ActionKind::BestOfN,
        ActionKind::NaiveGeneration,
    ];
    for action in plan {
        state = step(&state, &Decision::forced(action, format!("why {action}")), &config, &backend).unwrap().0;
    }
    let prompt = build_policy_prompt(&state, &config);
    assert!(prompt.contains("Earlier steps 1-2: naive_generation, prompt_enhancement"));
    for s in 3..=7 {
        assert!(prompt.contains(&format!("Step {s}:")), "step {s} verbatim");
    }
    assert!(!prompt.contains("Step 1:"));
    assert!(!prompt.contains("Step 2:"));
}

#[test]
fn parser_examples() {
    let full: std::collections::BTreeSet<ActionKind> = ActionKind::ALL.into_iter().collect();
    let d = parse_decision(
        r#"{"action":"prompt_refinement","reason":"image does not clearly show the mold"}"#,
        &full,
    )
    .unwrap();
    assert_eq!(d.action, ActionKind::PromptRevision);
    assert_eq!(d.rationale, "image does not clearly show the mold");

    assert_eq!(parse_decision("Best-of-N Sampling", &full).unwrap().action, ActionKind::BestOfN);
    assert_eq!(
        parse_decision(r#"{"action":"STOP","reason":"satisfactory"}"#, &full).unwrap().action,
        ActionKind::Stop
    );
    let no_image = action_mask(&AgentState::generation("x"));
    assert_eq!(
        parse_decision(r#"{"action":"image_detail_refinement","reason":"x"}"#, &no_image),
        Err(ParseError::MaskedAction(ActionKind::ImageDetailRefinement))
    );
    assert_eq!(
        parse_decision("I would go with naive generation, then STOP.", &full).unwrap().action,
        ActionKind::NaiveGeneration
    );
    assert_eq!(parse_decision("gibberish", &full), Err(ParseError::NoAction));
}

#[test]
fn unparseable_replies_fall_back_to_stop_once_an_image_exists() {
    let backend = scripted(&["naive_generation", "raw:gibberish"]);
    let trace = run_generation(&RunConfig::default(), &backend, "a red cube");
    assert_eq!(trace.steps.len(), 1);
    let stop = trace.stop_decision.unwrap();
    assert!(stop.fallback);
    assert_eq!(stop.action, ActionKind::Stop);
    assert_eq!(stop.parse_attempts, 3);
    assert_eq!(stop.raw, "gibberish");
}

#[test]
fn unparseable_replies_without_image_fall_back_to_generation() {
    let backend = scripted(&["raw:gibberish"]);
    let state = AgentState::generation("a red cube");
    let d = decide(&backend, &state, &RunConfig::default()).unwrap();
    assert!(d.fallback);
    assert_eq!(d.action, ActionKind::NaiveGeneration);
}

#[test]
fn heuristic_controller_reaches_full_alignment_without_noise() {
    let trace = run_generation(&RunConfig::default(), &noiseless(), "a red cube on a wooden table");
    assert_eq!(trace.steps.len(), 1);
    assert_eq!(trace.terminal, Terminal::Stopped);
    let attrs = oracle_attributes(trace.final_image.as_ref().unwrap());
    let want = common::oracle_keywords(&vocabulary(), "a red cube on a wooden table");
    assert_eq!(attrs, want);
}

#[test]
fn invalid_config_aborts() {
    let config = RunConfig {
        best_of_n: 0,
        ..RunConfig::default()
    };
    let trace = run_generation(&config, &noiseless(), "a red cube");
    assert!(trace.terminal.is_aborted());
    assert_eq!(trace.mode, Mode::Generation);
}

#[test]
fn unreadable_input_image_aborts_editing() {
    let dir = tempfile::tempdir().unwrap();
    let store = ArtifactStore::in_dir(dir.path());
    let stored = store.put(b"{\"attributes\":[\"cat\"]}".to_vec(), imagent::backend::ImageFormat::SimJson).unwrap();
    let detached: imagent::ImageRef = serde_json::from_value(serde_json::to_value(&stored).unwrap()).unwrap();
    let trace = run_editing(&RunConfig::default(), &noiseless(), "add a hat", detached);
    assert!(trace.terminal.is_aborted());
}
