//! Command-line front end. Settings are layered as built-in defaults, then
//! the TOML config file, then environment variables, then flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use imagent::agent::{run_editing, run_generation, Terminal, Trace};
use imagent::backend::server::{serve, ServerConfig};
use imagent::backend::http::{HttpBackend, HttpConfig, ENV_API_KEY, ENV_ENDPOINT};
use imagent::backend::{ArtifactStore, BackendHandle, BackendInfo, ImageRef, SimBackend, SimWorldConfig};
use imagent::conformance::{run_suite, ConformanceOptions};
use imagent::bench::{load_corpus, run_bench, synthetic_corpus, PolicyVariant};
use imagent::trace_store::{self, diff_traces, load_trace, save_trace};
use imagent::policy::Decision;
use imagent::templates::{clip, one_line};
use imagent::RunConfig;

const EXIT_OK: u8 = 0;
const EXIT_FAILED: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "imagent", version, about = "Test-time agent for image generation and editing")]
pub struct Cli {
    /// TOML settings file.
    #[arg(long, global = true, env = "IMAGENT_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate an image from a text prompt.
    RunGen {
        prompt: String,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Edit an input image following an instruction.
    RunEdit {
        prompt: String,
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Compare policy variants over a prompt corpus.
    Bench {
        /// JSON-lines corpus of {id, prompt, mode?, image_path?}.
        #[arg(long, conflicts_with = "synthetic")]
        corpus: Option<PathBuf>,
        /// Use a seeded synthetic corpus of this many prompts instead.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Comma-separated variants: controller, random[:seed], fixed:<action>.
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Worker threads.
        #[arg(long)]
        parallel: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Re-execute a recorded trace with its recorded decisions and compare.
    Replay {
        trace: PathBuf,
        /// Where to save the replayed run; not saved when omitted.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        overrides: ReplayArgs,
    },
    /// Check a trace file against the schema, its artifacts and invariants.
    Validate { trace: PathBuf },
    /// Serve the simulated world over the HTTP model protocol.
    ServeSim {
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: String,
        #[arg(long, default_value_t = 4)]
        workers: usize,
        #[command(flatten)]
        backend: BackendArgs,
    },
    /// Run the protocol conformance checks against a model server.
    Conformance {
        #[arg(long, env = ENV_ENDPOINT)]
        endpoint: String,
        /// Also require identical outputs for repeated seeded calls.
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        timeout_secs: Option<u64>,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    best_of_n: Option<usize>,
    #[arg(long)]
    parse_retries: Option<u32>,
    #[arg(long)]
    history_window: Option<usize>,
    #[arg(long, env = "IMAGENT_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Directory name under the output dir; a fresh UUID when omitted.
    #[arg(long)]
    run_id: Option<String>,
}

/// Replays use the backend recorded in the trace unless told otherwise.
#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long, value_enum)]
    backend: Option<BackendKind>,
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    refine_gain: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BackendKind {
    Sim,
    Http,
}

#[derive(Debug, Args)]
struct BackendArgs {
    #[arg(long, value_enum, env = "IMAGENT_BACKEND")]
    backend: Option<BackendKind>,
    #[arg(long, env = ENV_ENDPOINT)]
    endpoint: Option<String>,
    /// Per-request timeout in seconds for every HTTP call.
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    noise_rate: Option<f64>,
    #[arg(long)]
    refine_gain: Option<u32>,
    /// Scripted controller reply for the simulated backend, one per step.
    #[arg(long = "script")]
    script: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    run: FileRun,
    #[serde(default)]
    backend: FileBackend,
    #[serde(default)]
    sim: FileSim,
    #[serde(default)]
    output: FileOutput,
    #[serde(default)]
    bench: FileBench,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileRun {
    t_max: Option<usize>,
    best_of_n: Option<usize>,
    seed: Option<u64>,
    parse_retries: Option<u32>,
    history_window: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBackend {
    kind: Option<BackendKind>,
    endpoint: Option<String>,
    timeout_secs: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileSim {
    noise_rate: Option<f64>,
    refine_gain: Option<u32>,
    vocabulary: Option<Vec<String>>,
    script: Option<Vec<String>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileOutput {
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBench {
    parallel: Option<usize>,
    variants: Option<Vec<String>>,
}

/// Usage problems exit with status 2; everything else with 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Read when no `--config` is given and the file exists.
pub const DEFAULT_CONFIG_FILE: &str = "imagent.toml";

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let default = Path::new(DEFAULT_CONFIG_FILE);
    let path = match path {
        Some(p) => p,
        None if default.is_file() => default,
        None => return Ok(FileConfig::default()),
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))
}

struct Settings {
    run: RunConfig,
    out_dir: PathBuf,
    run_id: String,
    backend: BackendSettings,
}

struct BackendSettings {
    kind: BackendKind,
    endpoint: Option<String>,
    timeout: Option<Duration>,
    world: SimWorldConfig,
}

impl Settings {
    fn resolve(run: &RunArgs, backend: &BackendArgs, file: &FileConfig) -> Result<Self> {
        let defaults = RunConfig::default();
        let config = RunConfig {
            t_max: run.t_max.or(file.run.t_max).unwrap_or(defaults.t_max),
            best_of_n: run.best_of_n.or(file.run.best_of_n).unwrap_or(defaults.best_of_n),
            seed: run.seed.or(file.run.seed).unwrap_or(defaults.seed),
            parse_retries: run.parse_retries.or(file.run.parse_retries).unwrap_or(defaults.parse_retries),
            history_window: run.history_window.or(file.run.history_window).unwrap_or(defaults.history_window),
        };
        config.validate().map_err(|e| usage(e.to_string()))?;
        Ok(Self {
            run: config,
            out_dir: run
                .out_dir
                .clone()
                .or_else(|| file.output.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("runs")),
            run_id: run.run_id.clone().unwrap_or_else(|| uuid::Uuid::new_v4().to_string()),
            backend: BackendSettings::resolve(backend, file)?,
        })
    }

    fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.run_id)
    }

    fn echo(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        out.insert("run_id".into(), self.run_id.clone());
        out.insert("out_dir".into(), self.out_dir.display().to_string());
        out.extend(self.backend.echo());
        out
    }
}

impl BackendSettings {
    fn resolve(args: &BackendArgs, file: &FileConfig) -> Result<Self> {
        let kind = args.backend.or(file.backend.kind).unwrap_or(BackendKind::Sim);
        let endpoint = args.endpoint.clone().or_else(|| file.backend.endpoint.clone());
        if kind == BackendKind::Http && endpoint.is_none() {
            return Err(usage(format!("the http backend needs --endpoint or {ENV_ENDPOINT}")));
        }
        let mut world = SimWorldConfig::default();
        if let Some(v) = file.sim.vocabulary.clone() {
            world.vocabulary = v;
        }
        world.noise_rate = args.noise_rate.or(file.sim.noise_rate).unwrap_or(world.noise_rate);
        world.refine_gain = args.refine_gain.or(file.sim.refine_gain).unwrap_or(world.refine_gain);
        let script = if args.script.is_empty() {
            file.sim.script.clone()
        } else {
            Some(args.script.clone())
        };
        world.scripted_controller = script;
        world.validate().map_err(usage)?;
        Ok(Self {
            kind,
            endpoint,
            timeout: args.timeout_secs.or(file.backend.timeout_secs).map(Duration::from_secs),
            world,
        })
    }

    fn build(&self, store: ArtifactStore) -> Result<BackendHandle> {
        match self.kind {
            BackendKind::Sim => Ok(BackendHandle::simulated(self.world.clone(), store)),
            BackendKind::Http => {
                let endpoint = self.endpoint.clone().expect("checked during resolve");
                connect_http(endpoint, self.timeout, store)
            }
        }
    }

    fn echo(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        match self.kind {
            BackendKind::Sim => {
                out.insert("backend".into(), "sim".into());
                out.insert("noise_rate".into(), self.world.noise_rate.to_string());
                out.insert("refine_gain".into(), self.world.refine_gain.to_string());
            }
            BackendKind::Http => {
                out.insert("backend".into(), "http".into());
                out.insert("endpoint".into(), self.endpoint.clone().unwrap_or_default());
                if let Some(t) = self.timeout {
                    out.insert("timeout_secs".into(), t.as_secs().to_string());
                }
            }
        }
        out
    }
}

fn connect_http(endpoint: String, timeout: Option<Duration>, store: ArtifactStore) -> Result<BackendHandle> {
    let mut config = HttpConfig::new(endpoint).with_api_key(std::env::var(ENV_API_KEY).ok());
    if let Some(t) = timeout {
        config = config.with_timeouts(t);
    }
    let backend = HttpBackend::connect(config).context("connecting to model server")?;
    Ok(BackendHandle::new(backend, store))
}

fn log_decision(step: usize, decision: &Decision) -> String {
    let mut line = format!("step {step}: {}", decision.action);
    if decision.fallback {
        line.push_str(" [fallback]");
    }
    let rationale = one_line(&decision.rationale);
    if !rationale.is_empty() {
        line.push_str(&format!(" | {}", clip(&rationale, 160)));
    }
    line
}

fn log_steps(trace: &Trace) {
    for s in &trace.steps {
        let mut line = log_decision(s.step, &s.decision);
        if let Some(score) = s.observation.score {
            line.push_str(&format!(" | score {score:.4}"));
        }
        if let Some(failure) = &s.observation.failure {
            line.push_str(&format!(" | failed: {}", one_line(failure)));
        }
        eprintln!("{line}");
    }
    if let Some(stop) = &trace.stop_decision {
        eprintln!("{}", log_decision(trace.steps.len() + 1, stop));
    }
    match &trace.terminal {
        Terminal::Aborted { reason } => eprintln!("aborted: {reason}"),
        other => eprintln!("{}", other.label()),
    }
}

fn artifact_path(run_dir: &Path, image: &ImageRef) -> PathBuf {
    run_dir.join(&image.path)
}

fn finish_run(settings: &Settings, mut trace: Trace) -> Result<u8> {
    trace.settings = settings.echo();
    let run_dir = settings.run_dir();
    let path = save_trace(&trace, &run_dir)?;
    log_steps(&trace);
    println!("run_id={}", settings.run_id);
    println!("run_dir={}", run_dir.display());
    println!("trace={}", path.display());
    println!("terminal={}", trace.terminal.label());
    println!("steps={}", trace.steps.len());
    if let Some(image) = &trace.final_image {
        println!("final_image={}", artifact_path(&run_dir, image).display());
    }
    println!("final_prompt={}", one_line(&trace.final_prompt));
    Ok(if trace.terminal.is_aborted() { EXIT_FAILED } else { EXIT_OK })
}

fn cmd_run_gen(prompt: &str, run: &RunArgs, backend: &BackendArgs, file: &FileConfig) -> Result<u8> {
    let settings = Settings::resolve(run, backend, file)?;
    let handle = settings.backend.build(ArtifactStore::in_dir(settings.run_dir()))?;
    let trace = run_generation(&settings.run, &handle, prompt);
    finish_run(&settings, trace)
}

fn cmd_run_edit(prompt: &str, image: &Path, run: &RunArgs, backend: &BackendArgs, file: &FileConfig) -> Result<u8> {
    let settings = Settings::resolve(run, backend, file)?;
    let i0 = ImageRef::from_file(image).map_err(|e| usage(format!("cannot read input image {}: {e}", image.display())))?;
    let handle = settings.backend.build(ArtifactStore::in_dir(settings.run_dir()))?;
    let trace = run_editing(&settings.run, &handle, prompt, i0);
    finish_run(&settings, trace)
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    corpus: Option<&Path>,
    synthetic: Option<usize>,
    variants: Option<&[String]>,
    parallel: Option<usize>,
    run: &RunArgs,
    backend: &BackendArgs,
    file: &FileConfig,
) -> Result<u8> {
    let settings = Settings::resolve(run, backend, file)?;
    let entries = match (corpus, synthetic) {
        (Some(path), _) => load_corpus(path).map_err(|e| usage(e.to_string()))?,
        (None, Some(n)) if n > 0 => synthetic_corpus(n, &settings.backend.world.vocabulary, settings.run.seed),
        _ => return Err(usage("bench needs --corpus or a positive --synthetic count")),
    };
    let names: Vec<String> = variants
        .map(<[String]>::to_vec)
        .or_else(|| file.bench.variants.clone())
        .unwrap_or_else(|| vec!["controller".into(), "random".into(), "fixed:naive_generation".into()]);
    let variants = names
        .iter()
        .map(|v| PolicyVariant::parse(v, settings.run.seed))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let parallel = parallel
        .or(file.bench.parallel)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if parallel == 0 {
        return Err(usage("--parallel must be at least 1"));
    }
    let run_dir = settings.run_dir();
    let handle = settings.backend.build(ArtifactStore::in_dir(&run_dir))?;
    let report = run_bench(&entries, &variants, &settings.run, &handle, parallel)?;
    let (json, txt) = report.write(&run_dir)?;
    eprint!("{}", report.to_text());
    println!("run_id={}", settings.run_id);
    println!("report_json={}", json.display());
    println!("report_txt={}", txt.display());
    println!("rows={}", report.rows.len());
    for s in &report.aggregate {
        println!(
            "variant={} runs={} mean_score={:.4} mean_steps={:.2}",
            s.variant, s.runs, s.mean_score, s.mean_steps
        );
    }
    let errors = report.rows.iter().filter(|r| r.error.is_some()).count();
    println!("errors={errors}");
    Ok(EXIT_OK)
}

fn replay_backend(recorded: &BackendInfo, overrides: &ReplayArgs, store: ArtifactStore) -> Result<BackendHandle> {
    let recorded_kind = match recorded {
        BackendInfo::Simulated { .. } => BackendKind::Sim,
        BackendInfo::Http { .. } => BackendKind::Http,
    };
    match overrides.backend.unwrap_or(recorded_kind) {
        BackendKind::Sim => {
            let mut world = match recorded {
                BackendInfo::Simulated { world } => world.clone(),
                BackendInfo::Http { .. } => SimWorldConfig::default(),
            };
            if let Some(noise) = overrides.noise_rate {
                world.noise_rate = noise;
            }
            if let Some(gain) = overrides.refine_gain {
                world.refine_gain = gain;
            }
            world.validate().map_err(usage)?;
            Ok(BackendHandle::simulated(world, store))
        }
        BackendKind::Http => {
            let endpoint = match (&overrides.endpoint, recorded) {
                (Some(e), _) => e.clone(),
                (None, BackendInfo::Http { endpoint }) => endpoint.clone(),
                (None, BackendInfo::Simulated { .. }) => {
                    return Err(usage("replaying a simulated trace over http needs --endpoint"))
                }
            };
            connect_http(endpoint, None, store)
        }
    }
}

fn cmd_replay(trace_path: &Path, out_dir: Option<&Path>, overrides: &ReplayArgs) -> Result<u8> {
    let recorded = load_trace(trace_path).with_context(|| format!("loading {}", trace_path.display()))?;
    let store = match out_dir {
        Some(dir) => ArtifactStore::in_dir(dir),
        None => ArtifactStore::in_memory(),
    };
    let handle = replay_backend(&recorded.backend, overrides, store)?;
    let replayed = trace_store::replay(&recorded, &handle);
    log_steps(&replayed);
    if let Some(dir) = out_dir {
        let path = save_trace(&replayed, dir)?;
        println!("replay_trace={}", path.display());
    }
    let diff = diff_traces(&recorded, &replayed);
    for d in &diff.differences {
        eprintln!("step {} {}: expected {} got {}", d.step, d.field, d.expected, d.actual);
    }
    println!("steps={}", replayed.steps.len());
    println!("terminal={}", replayed.terminal.label());
    println!("differences={}", diff.differences.len());
    if diff.is_identical() {
        println!("verdict=identical");
        Ok(EXIT_OK)
    } else {
        println!("verdict=diverged");
        Ok(EXIT_FAILED)
    }
}

fn cmd_validate(trace_path: &Path) -> Result<u8> {
    let problems = trace_store::validate(trace_path);
    for p in &problems {
        eprintln!("{p}");
    }
    println!("problems={}", problems.len());
    if problems.is_empty() {
        println!("verdict=valid");
        Ok(EXIT_OK)
    } else {
        println!("verdict=invalid");
        Ok(EXIT_FAILED)
    }
}

fn cmd_serve_sim(listen: &str, workers: usize, backend: &BackendArgs, file: &FileConfig) -> Result<u8> {
    let settings = BackendSettings::resolve(backend, file)?;
    let config = ServerConfig {
        listen: listen.to_string(),
        workers,
        api_key: std::env::var(ENV_API_KEY).ok(),
    };
    let server = serve(Arc::new(SimBackend::new(settings.world)), config)
        .with_context(|| format!("binding {listen}"))?;
    println!("listening={}", server.endpoint());
    server.join();
    Ok(EXIT_OK)
}

fn cmd_conformance(endpoint: &str, deterministic: bool, timeout_secs: Option<u64>) -> Result<u8> {
    let mut options = ConformanceOptions::new(endpoint);
    options.api_key = std::env::var(ENV_API_KEY).ok();
    options.expect_deterministic = deterministic;
    if let Some(t) = timeout_secs {
        options.timeout = Duration::from_secs(t);
    }
    let results = run_suite(options);
    for r in &results {
        println!(
            "check={} result={} detail={}",
            r.name,
            if r.passed { "pass" } else { "fail" },
            one_line(&r.detail)
        );
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("passed={} failed={failed}", results.len() - failed);
    Ok(if failed == 0 { EXIT_OK } else { EXIT_FAILED })
}

fn dispatch(cli: Cli) -> Result<u8> {
    let file = load_file_config(cli.config.as_deref())?;
    match &cli.command {
        Command::RunGen { prompt, run, backend } => cmd_run_gen(prompt, run, backend, &file),
        Command::RunEdit {
            prompt,
            image,
            run,
            backend,
        } => cmd_run_edit(prompt, image, run, backend, &file),
        Command::Bench {
            corpus,
            synthetic,
            variants,
            parallel,
            run,
            backend,
        } => cmd_bench(
            corpus.as_deref(),
            *synthetic,
            variants.as_deref(),
            *parallel,
            run,
            backend,
            &file,
        ),
        Command::Replay {
            trace,
            out_dir,
            overrides,
        } => cmd_replay(trace, out_dir.as_deref(), overrides),
        Command::Validate { trace } => cmd_validate(trace),
        Command::ServeSim {
            listen,
            workers,
            backend,
        } => cmd_serve_sim(listen, *workers, backend, &file),
        Command::Conformance {
            endpoint,
            deterministic,
            timeout_secs,
        } => cmd_conformance(endpoint, *deterministic, *timeout_secs),
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                eprintln!("Run 'imagent --help' for usage.");
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_FAILED)
            }
        }
    }
}

