mod common;

use common::{oracle_attributes, sim, sim_image};
use imagent::agent::{run_generation, RunConfig};
use imagent::backend::{
    ArtifactStore, BackendError, BackendHandle, BackendInfo, Capabilities, ImageRef, ModelBackend, RawImage,
    SimBackend, SimWorldConfig, UnderstandRequest,
};
use imagent::templates;

fn set(items: &[&str]) -> std::collections::BTreeSet<String> {
    items.iter().map(|s| s.to_string()).collect()
}

#[test]
fn judge_reply_for_half_overlap() {
    let backend = sim(SimWorldConfig::default());
    let image = sim_image(&["red"]);
    let reply = backend
        .understand(templates::JUDGE.id, &templates::JUDGE.render(&[("prompt", "red cube")]), &[image])
        .unwrap();
    assert_eq!(reply, "Score: 5 — missing: cube");
}

#[test]
fn scripted_stop_reply() {
    let backend = sim(SimWorldConfig::default().with_script(["STOP"]));
    let text = templates::POLICY_GENERATION.render(&[("step", "1"), ("t_max", "5")]);
    let reply = backend.understand(templates::POLICY_GENERATION.id, &text, &[]).unwrap();
    assert_eq!(reply, r#"{"action":"STOP","reason":"scripted"}"#);
}

#[test]
fn noiseless_generation_is_exact() {
    let backend = sim(SimWorldConfig::default().with_noise(0.0));
    let image = backend.generate("red cube", 1).unwrap();
    assert_eq!(oracle_attributes(&image), set(&["red", "cube"]));
}

#[test]
fn neighbouring_seeds_usually_differ() {
    let backend = sim(SimWorldConfig::default().with_noise(0.5));
    let prompt = "a red cube, a blue sphere, a golden clock and a tiny robot";
    let differing = (0..100u64)
        .filter(|s| backend.generate(prompt, *s).unwrap().digest != backend.generate(prompt, s + 1).unwrap().digest)
        .count();
    assert!(differing > 50, "{differing}");
}

#[test]
fn generation_is_deterministic() {
    let a = sim(SimWorldConfig::default().with_noise(0.5));
    let b = sim(SimWorldConfig::default().with_noise(0.5));
    for seed in 0..50 {
        assert_eq!(
            a.generate("a furry dog under a tree", seed).unwrap().digest,
            b.generate("a furry dog under a tree", seed).unwrap().digest
        );
    }
}

#[test]
fn edit_closes_one_gap() {
    let backend = sim(SimWorldConfig::default());
    let out = backend.edit("moldy bread", &sim_image(&["bread"]), 3).unwrap();
    assert_eq!(oracle_attributes(&out), set(&["bread", "moldy"]));
}

#[test]
fn edit_with_larger_gain_closes_more_gaps() {
    let world = SimWorldConfig {
        refine_gain: 2,
        ..SimWorldConfig::default()
    };
    let backend = sim(world);
    let out = backend.edit("moldy bread in a red cup on a table", &sim_image(&["bread"]), 3).unwrap();
    assert_eq!(oracle_attributes(&out).len(), 3);
}

#[test]
fn edit_without_gaps_is_a_fixed_point() {
    let backend = sim(SimWorldConfig::default());
    let image = sim_image(&["bread", "moldy"]);
    assert_eq!(backend.edit("moldy bread", &image, 3).unwrap().digest, image.digest);
}

#[test]
fn edit_on_generation_only_world_is_refused() {
    let world = SimWorldConfig {
        supports_edit: false,
        ..SimWorldConfig::default()
    };
    let backend = sim(world);
    assert!(matches!(
        backend.edit("moldy bread", &sim_image(&["bread"]), 3),
        Err(BackendError::CapabilityMissing(_))
    ));
}

#[test]
fn empty_prompt_is_rejected() {
    let backend = sim(SimWorldConfig::default());
    assert!(matches!(backend.generate("  ", 1), Err(BackendError::BadRequest(_))));
}

#[test]
fn world_config_is_validated() {
    assert!(SimWorldConfig::default().with_noise(1.5).validate().is_err());
    assert!(SimWorldConfig {
        refine_gain: 0,
        ..SimWorldConfig::default()
    }
    .validate()
    .is_err());
}

#[test]
fn artifacts_land_in_the_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let backend = BackendHandle::simulated(SimWorldConfig::default(), ArtifactStore::in_dir(dir.path()));
    let image = backend.generate("a red cube", 5).unwrap();
    let on_disk = std::fs::read(dir.path().join(&image.path)).unwrap();
    assert_eq!(imagent::backend::artifact::digest_bytes(&on_disk), image.digest);
    assert!(image.path.to_string_lossy().ends_with(".sim.json"));
}

/// Simulated model that cannot look at images while understanding.
struct Blind(SimBackend);

impl ModelBackend for Blind {
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            supports_image_in_understand: false,
            ..self.0.capabilities()
        }
    }
    fn info(&self) -> BackendInfo {
        self.0.info()
    }
    fn understand(&self, request: &UnderstandRequest<'_>) -> Result<String, BackendError> {
        self.0.understand(request)
    }
    fn generate(&self, prompt: &str, seed: u64) -> Result<RawImage, BackendError> {
        self.0.generate(prompt, seed)
    }
    fn edit(&self, prompt: &str, image: &ImageRef, seed: u64) -> Result<RawImage, BackendError> {
        self.0.edit(prompt, image, seed)
    }
}

#[test]
fn text_only_understanding_aborts_instead_of_degrading() {
    let backend = BackendHandle::new(Blind(SimBackend::new(SimWorldConfig::default())), ArtifactStore::in_memory());
    let trace = run_generation(&RunConfig::default(), &backend, "a red cube");
    assert_eq!(trace.steps.len(), 1);
    assert!(trace.terminal.is_aborted(), "{:?}", trace.terminal);
    let image = trace.final_image.unwrap();
    assert!(matches!(
        backend.understand(templates::JUDGE.id, "Prompt: red cube", &[image]),
        Err(BackendError::CapabilityMissing(_))
    ));
}
