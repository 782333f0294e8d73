//! Test-time agent for text-to-image generation and image editing.
//!
//! A policy controller repeatedly inspects the current prompt and image and
//! picks one of a small set of actions (plain sampling, prompt enhancement,
//! prompt revision, detail refinement, best-of-N sampling) until it decides
//! to stop or the step budget runs out. Every run produces a replayable trace.

pub mod actions;
pub mod agent;
pub mod backend;
pub mod conformance;
pub mod bench;
pub mod policy;
pub mod seed;
pub mod templates;
pub mod trace_store;

pub use agent::{run_editing, run_generation, AgentState, Mode, RunConfig, Terminal, Trace};
pub use backend::{BackendError, BackendHandle, ImageRef, ModelBackend};
pub use policy::{ActionKind, Decision};
