//! Policy comparison over a prompt corpus: the model controller against a
//! uniformly random policy and single fixed actions, all scored by the judge
//! against the original prompt.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actions::evaluate_alignment;
use crate::agent::{run_editing_with, run_generation_with, step, AgentState, Mode, RunConfig, Trace};
use crate::backend::{BackendError, BackendHandle, ImageRef};
use crate::policy::{action_mask, ActionKind, ControllerPolicy, Decision, ForcedPolicy, Policy};
use crate::seed::rng_from;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid policy variant: {0}")]
    InvalidVariant(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus line {line}: {message}")]
    Corpus { line: usize, message: String },
    #[error("bench io: {0}")]
    Io(#[from] std::io::Error),
    #[error("report serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PolicyVariant {
    Controller,
    Random { seed: u64 },
    /// One run of a single action (preceded by a naive generation when the
    /// action needs an image to work on).
    Fixed(ActionKind),
}

impl PolicyVariant {
    pub fn validate(&self) -> Result<(), BenchError> {
        match self {
            PolicyVariant::Fixed(ActionKind::Stop) => {
                Err(BenchError::InvalidVariant("fixed STOP executes nothing".into()))
            }
            _ => Ok(()),
        }
    }

    /// Parses `controller`, `random`, `random:<seed>` or `fixed:<action>`.
    /// A bare `random` takes `default_seed`.
    pub fn parse(text: &str, default_seed: u64) -> Result<Self, BenchError> {
        let text = text.trim();
        let (head, arg) = match text.split_once(':') {
            Some((h, a)) => (h, Some(a.trim())),
            None => (text, None),
        };
        let variant = match (head.to_ascii_lowercase().as_str(), arg) {
            ("controller", None) => PolicyVariant::Controller,
            ("random", None) => PolicyVariant::Random { seed: default_seed },
            ("random", Some(seed)) => PolicyVariant::Random {
                seed: seed
                    .parse()
                    .map_err(|_| BenchError::InvalidVariant(format!("bad random seed {seed:?}")))?,
            },
            ("fixed", Some(action)) => PolicyVariant::Fixed(
                ActionKind::from_wire(action)
                    .ok_or_else(|| BenchError::InvalidVariant(format!("unknown action {action:?}")))?,
            ),
            _ => return Err(BenchError::InvalidVariant(text.to_string())),
        };
        variant.validate()?;
        Ok(variant)
    }
}

impl fmt::Display for PolicyVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyVariant::Controller => f.write_str("controller"),
            PolicyVariant::Random { seed } => write!(f, "random:{seed}"),
            PolicyVariant::Fixed(action) => write!(f, "fixed:{action}"),
        }
    }
}

impl FromStr for PolicyVariant {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s, 0)
    }
}

/// Uniform choice over the permitted actions (STOP included once allowed).
pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64, stream: &str) -> Self {
        Self {
            rng: rng_from(&[b"random-policy", &seed.to_le_bytes(), stream.as_bytes()]),
        }
    }
}

impl Policy for RandomPolicy {
    fn decide(&mut self, state: &AgentState, _: &RunConfig, _: &BackendHandle) -> Result<Decision, BackendError> {
        let mask: Vec<ActionKind> = action_mask(state).into_iter().collect();
        let action = *mask.choose(&mut self.rng).expect("mask is never empty");
        Ok(Decision::forced(action, "random selection"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub prompt: String,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
}

fn default_mode() -> Mode {
    Mode::Generation
}

impl CorpusEntry {
    pub fn generation(id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            prompt: prompt.into(),
            mode: Mode::Generation,
            image_path: None,
        }
    }
}

/// Reads a JSON-lines corpus. Relative image paths resolve against the
/// corpus file's directory.
pub fn load_corpus(path: &Path) -> Result<Vec<CorpusEntry>, BenchError> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: CorpusEntry = serde_json::from_str(line).map_err(|e| BenchError::Corpus {
            line: i + 1,
            message: e.to_string(),
        })?;
        if entry.mode == Mode::Editing && entry.image_path.is_none() {
            return Err(BenchError::Corpus {
                line: i + 1,
                message: "editing entry without image_path".into(),
            });
        }
        if let Some(p) = &entry.image_path {
            if p.is_relative() {
                entry.image_path = Some(base.join(p));
            }
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(BenchError::EmptyCorpus);
    }
    Ok(entries)
}

/// Seeded corpus of short prompts over the simulated vocabulary, each
/// naming 2 to 6 distinct attributes.
pub fn synthetic_corpus(count: usize, vocabulary: &[String], seed: u64) -> Vec<CorpusEntry> {
    const FILLERS: &[&str] = &["a", "the", "with", "on", "near", "and", "of"];
    let mut rng = rng_from(&[b"synthetic-corpus", &seed.to_le_bytes()]);
    (0..count)
        .map(|i| {
            let k = rng.random_range(2..=6).min(vocabulary.len());
            let words: Vec<&String> = vocabulary.choose_multiple(&mut rng, k).collect();
            let mut prompt = String::new();
            for (j, w) in words.iter().enumerate() {
                if j > 0 {
                    prompt.push(' ');
                    prompt.push_str(FILLERS.choose(&mut rng).expect("fillers"));
                    prompt.push(' ');
                }
                prompt.push_str(w);
            }
            CorpusEntry::generation(format!("p{i:04}"), prompt)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub prompt_id: String,
    pub variant: String,
    pub final_score: f64,
    pub steps_executed: usize,
    pub fallback_count: usize,
    pub terminal: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    pub mean_score: f64,
    pub mean_steps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub aggregate: Vec<VariantSummary>,
}

impl BenchReport {
    /// Builds the per-variant means, in order of first appearance.
    pub fn from_rows(rows: Vec<BenchRow>) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut sums: BTreeMap<String, (usize, f64, usize)> = BTreeMap::new();
        for row in &rows {
            let entry = sums.entry(row.variant.clone()).or_insert_with(|| {
                order.push(row.variant.clone());
                (0, 0.0, 0)
            });
            entry.0 += 1;
            entry.1 += row.final_score;
            entry.2 += row.steps_executed;
        }
        let aggregate = order
            .into_iter()
            .map(|variant| {
                let (runs, score, steps) = sums[&variant];
                VariantSummary {
                    mean_score: score / runs as f64,
                    mean_steps: steps as f64 / runs as f64,
                    runs,
                    variant,
                }
            })
            .collect();
        Self { rows, aggregate }
    }

    pub fn mean_score(&self, variant: &PolicyVariant) -> Option<f64> {
        let label = variant.to_string();
        self.aggregate.iter().find(|s| s.variant == label).map(|s| s.mean_score)
    }

    /// Aligned plain-text rendering: per-run rows, then the summary.
    pub fn to_text(&self) -> String {
        let mut table: Vec<[String; 6]> = vec![[
            "prompt_id".into(),
            "variant".into(),
            "score".into(),
            "steps".into(),
            "fallbacks".into(),
            "terminal".into(),
        ]];
        for r in &self.rows {
            table.push([
                r.prompt_id.clone(),
                r.variant.clone(),
                format!("{:.4}", r.final_score),
                r.steps_executed.to_string(),
                r.fallback_count.to_string(),
                r.terminal.clone(),
            ]);
        }
        let mut out = render_table(&table);
        out.push('\n');
        let mut summary: Vec<[String; 4]> =
            vec![["variant".into(), "runs".into(), "mean_score".into(), "mean_steps".into()]];
        for s in &self.aggregate {
            summary.push([
                s.variant.clone(),
                s.runs.to_string(),
                format!("{:.4}", s.mean_score),
                format!("{:.2}", s.mean_steps),
            ]);
        }
        out.push_str(&render_table(&summary));
        out
    }

    /// Writes `report.json` and `report.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf), BenchError> {
        fs::create_dir_all(dir)?;
        let json = dir.join("report.json");
        let txt = dir.join("report.txt");
        fs::write(&json, serde_json::to_vec_pretty(self)?)?;
        fs::write(&txt, self.to_text())?;
        Ok((json, txt))
    }
}

fn render_table<const N: usize>(rows: &[[String; N]]) -> String {
    let mut widths = [0usize; N];
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Run seed for one corpus entry, shared by every variant so that their
/// first samples coincide.
pub fn prompt_seed(config_seed: u64, prompt_id: &str) -> u64 {
    rng_from(&[b"prompt-seed", &config_seed.to_le_bytes(), prompt_id.as_bytes()]).random()
}

fn policy_for(variant: &PolicyVariant, entry: &CorpusEntry) -> Box<dyn Policy> {
    match variant {
        PolicyVariant::Controller => Box::new(ControllerPolicy),
        PolicyVariant::Random { seed } => Box::new(RandomPolicy::new(*seed, &entry.id)),
        PolicyVariant::Fixed(action) => {
            let plan = if entry.mode == Mode::Generation && action.needs_image() {
                vec![ActionKind::NaiveGeneration, *action]
            } else {
                vec![*action]
            };
            Box::new(ForcedPolicy::from_actions(&plan))
        }
    }
}

/// Executes one (entry, variant) run.
pub fn run_entry(
    entry: &CorpusEntry,
    variant: &PolicyVariant,
    config: &RunConfig,
    backend: &BackendHandle,
) -> Result<Trace, String> {
    let config = config.clone().with_seed(prompt_seed(config.seed, &entry.id));
    let mut policy = policy_for(variant, entry);
    match entry.mode {
        Mode::Generation => Ok(run_generation_with(&config, backend, &entry.prompt, policy.as_mut())),
        Mode::Editing => {
            let path = entry.image_path.as_ref().ok_or("editing entry without image")?;
            let image = ImageRef::from_file(path).map_err(|e| e.to_string())?;
            Ok(run_editing_with(&config, backend, &entry.prompt, image, policy.as_mut()))
        }
    }
}

fn score_run(entry: &CorpusEntry, variant: &PolicyVariant, config: &RunConfig, backend: &BackendHandle) -> BenchRow {
    let mut row = BenchRow {
        prompt_id: entry.id.clone(),
        variant: variant.to_string(),
        final_score: 0.0,
        steps_executed: 0,
        fallback_count: 0,
        terminal: "error".to_string(),
        error: None,
    };
    let trace = match run_entry(entry, variant, config, backend) {
        Ok(t) => t,
        Err(e) => {
            row.error = Some(e);
            return row;
        }
    };
    row.steps_executed = trace.steps.len();
    row.fallback_count = trace.fallback_count();
    row.terminal = trace.terminal.label().to_string();
    if let crate::agent::Terminal::Aborted { reason } = &trace.terminal {
        row.error = Some(reason.clone());
    }
    match &trace.final_image {
        Some(image) => match evaluate_alignment(backend, &entry.prompt, image) {
            Ok(score) => row.final_score = score.score,
            Err(e) => row.error = Some(format!("final scoring failed: {e}")),
        },
        None => {
            row.error.get_or_insert_with(|| "no final image".to_string());
        }
    }
    row
}

/// Runs every variant on every corpus entry and scores the final images
/// against the original prompts. Failed runs score 0 and carry an error.
pub fn run_bench(
    corpus: &[CorpusEntry],
    variants: &[PolicyVariant],
    config: &RunConfig,
    backend: &BackendHandle,
    parallel: usize,
) -> Result<BenchReport, BenchError> {
    if corpus.is_empty() {
        return Err(BenchError::EmptyCorpus);
    }
    for v in variants {
        v.validate()?;
    }
    let jobs: Vec<(&CorpusEntry, &PolicyVariant)> = corpus
        .iter()
        .flat_map(|e| variants.iter().map(move |v| (e, v)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| BenchError::Pool(e.to_string()))?;
    let rows = pool.install(|| {
        jobs.par_iter()
            .map(|(entry, variant)| score_run(entry, variant, config, backend))
            .collect::<Vec<_>>()
    });
    Ok(BenchReport::from_rows(rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub best_score: f64,
    pub best_sequence: Vec<ActionKind>,
    pub sequences_explored: usize,
}

/// Exhaustive search over every action sequence of length at most `t_max`
/// (stopping is free at any point), scoring each reachable image against
/// the original prompt. Upper bound for any policy under the same seeds.
pub fn optimal_sequence_score(
    entry: &CorpusEntry,
    config: &RunConfig,
    backend: &BackendHandle,
) -> Result<OracleResult, String> {
    let config = config.clone().with_seed(prompt_seed(config.seed, &entry.id));
    let root = match entry.mode {
        Mode::Generation => AgentState::generation(entry.prompt.clone()),
        Mode::Editing => {
            let path = entry.image_path.as_ref().ok_or("editing entry without image")?;
            AgentState::editing(entry.prompt.clone(), ImageRef::from_file(path).map_err(|e| e.to_string())?)
        }
    };
    let mut best = OracleResult {
        best_score: 0.0,
        best_sequence: Vec::new(),
        sequences_explored: 0,
    };
    let mut path = Vec::new();
    search(&root, &config, backend, &entry.prompt, &mut path, &mut best)?;
    Ok(best)
}

fn search(
    state: &AgentState,
    config: &RunConfig,
    backend: &BackendHandle,
    original: &str,
    path: &mut Vec<ActionKind>,
    best: &mut OracleResult,
) -> Result<(), String> {
    best.sequences_explored += 1;
    // Editing runs must execute at least one action.
    let may_stop = !(state.mode == Mode::Editing && path.is_empty());
    if let (Some(image), true) = (&state.current_image, may_stop) {
        let score = evaluate_alignment(backend, original, image).map_err(|e| e.to_string())?.score;
        if score > best.best_score || best.best_sequence.is_empty() && path.len() > 0 && score >= best.best_score {
            best.best_score = score;
            best.best_sequence = path.clone();
        }
    }
    if path.len() == config.t_max || best.best_score >= 1.0 {
        return Ok(());
    }
    for action in action_mask(state).into_iter().filter(|a| *a != ActionKind::Stop) {
        let (next, _) = step(state, &Decision::forced(action, "oracle"), config, backend).map_err(|e| e.to_string())?;
        path.push(action);
        search(&next, config, backend, original, path, best)?;
        path.pop();
    }
    Ok(())
}
