use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

const BIN: &str = env!("CARGO_BIN_EXE_imagent");

fn imagent(cwd: &Path, args: &[&str]) -> Command {
    let mut cmd = Command::new(BIN);
    cmd.current_dir(cwd).args(args);
    for var in ["IMAGENT_ENDPOINT", "IMAGENT_API_KEY", "IMAGENT_OUT_DIR", "IMAGENT_CONFIG", "IMAGENT_BACKEND"] {
        cmd.env_remove(var);
    }
    cmd
}

fn run(cwd: &Path, args: &[&str]) -> Output {
    imagent(cwd, args).output().unwrap()
}

/// Parses `key=value` stdout lines, failing on anything else.
fn kv(out: &Output) -> BTreeMap<String, String> {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    text.lines()
        .map(|line| {
            let (k, v) = line.split_once('=').unwrap_or_else(|| panic!("not key=value: {line:?}"));
            assert!(k.chars().all(|c| c.is_ascii_lowercase() || c == '_'), "bad key {k:?}");
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn keys(out: &Output) -> Vec<String> {
    String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| l.split_once('=').unwrap().0.to_string())
        .collect()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn gen_run(dir: &Path, id: &str, extra: &[&str]) -> (Output, BTreeMap<String, String>) {
    let mut args = vec!["run-gen", "moldy bread", "--backend", "sim", "--seed", "7", "--t-max", "5"];
    args.extend(["--out-dir", "runs", "--run-id", id]);
    args.extend(extra);
    let out = run(dir, &args);
    let map = kv(&out);
    (out, map)
}

#[test]
fn run_gen_prints_machine_readable_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (out, map) = gen_run(dir.path(), "x", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(
        keys(&out),
        ["run_id", "run_dir", "trace", "terminal", "steps", "final_image", "final_prompt"]
    );
    assert_eq!(map["run_id"], "x");
    assert_eq!(map["trace"], "runs/x/trace.json");
    assert!(dir.path().join(&map["trace"]).is_file());
    assert!(dir.path().join(&map["final_image"]).is_file());
    assert_eq!(map["terminal"], "stopped");
    let log = stderr(&out);
    assert!(log.lines().any(|l| l.starts_with("step 1: naive_generation | ")), "{log}");
}

#[test]
fn run_edit_requires_an_image() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["run-edit", "add a hat", "--backend", "sim"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    let out = run(dir.path(), &["run-edit", "add a hat", "--image", "nope.sim.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn run_edit_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("cat.sim.json"), br#"{"attributes":["cat"]}"#).unwrap();
    let out = run(
        dir.path(),
        &["run-edit", "give the cat a red hat", "--image", "cat.sim.json", "--out-dir", "runs", "--run-id", "e"],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let map = kv(&out);
    assert!(dir.path().join(&map["trace"]).is_file());
    assert_ne!(map["steps"], "0");
}

#[test]
fn controller_fallback_completes_and_unreachable_backend_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let (out, map) = gen_run(dir.path(), "a", &["--script", "raw:{\"action\": 7}", "--parse-retries", "0", "--best-of-n", "1"]);
    assert_eq!(out.status.code(), Some(0), "fallback is not an abort: {}", stderr(&out));
    assert_eq!(map["terminal"], "stopped");

    let out = run(
        dir.path(),
        &["run-gen", "moldy bread", "--backend", "http", "--endpoint", "http://127.0.0.1:9", "--out-dir", "runs"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(stderr(&out).contains("unreachable"), "{}", stderr(&out));
}

#[test]
fn replay_reports_identical_for_same_world() {
    let dir = tempfile::tempdir().unwrap();
    let (_, map) = gen_run(dir.path(), "r", &["--noise-rate", "0.5"]);
    let out = run(dir.path(), &["replay", &map["trace"], "--backend", "sim"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let replay = kv(&out);
    assert_eq!(replay["verdict"], "identical");
    assert_eq!(replay["differences"], "0");
    assert_eq!(replay["steps"], map["steps"]);

    let out = run(dir.path(), &["replay", &map["trace"], "--noise-rate", "1.0", "--out-dir", "again"]);
    assert_eq!(out.status.code(), Some(1));
    let replay = kv(&out);
    assert_eq!(replay["verdict"], "diverged");
    assert!(dir.path().join(&replay["replay_trace"]).is_file());
}

#[test]
fn validate_accepts_good_and_rejects_tampered_traces() {
    let dir = tempfile::tempdir().unwrap();
    let (_, map) = gen_run(dir.path(), "v", &[]);
    let out = run(dir.path(), &["validate", &map["trace"]]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(kv(&out)["verdict"], "valid");

    fs::write(dir.path().join(&map["final_image"]), b"{\"attributes\":[]}").unwrap();
    let out = run(dir.path(), &["validate", &map["trace"]]);
    assert_eq!(out.status.code(), Some(1));
    let result = kv(&out);
    assert_eq!(result["verdict"], "invalid");
    assert_ne!(result["problems"], "0");

    let out = run(dir.path(), &["validate", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
}

fn write_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("corpus.jsonl");
    fs::write(
        &path,
        concat!(
            "{\"id\":\"a\",\"prompt\":\"moldy bread\"}\n",
            "{\"id\":\"b\",\"prompt\":\"a red cube beside a blue sphere\"}\n",
            "{\"id\":\"c\",\"prompt\":\"a furry cat wearing a golden hat\"}\n"
        ),
    )
    .unwrap();
    path
}

#[test]
fn bench_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    let out = run(
        dir.path(),
        &[
            "bench",
            "--corpus",
            "corpus.jsonl",
            "--variants",
            "fixed:naive_generation,random,controller",
            "--parallel",
            "2",
            "--out-dir",
            "runs",
            "--run-id",
            "b",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let map = kv(&out);
    assert_eq!(map["rows"], "9");
    assert_eq!(map["errors"], "0");
    assert_eq!(map["report_json"], "runs/b/report.json");
    assert!(dir.path().join(&map["report_json"]).is_file());
    assert!(dir.path().join(&map["report_txt"]).is_file());
    let variants: Vec<String> = String::from_utf8(out.stdout.clone())
        .unwrap()
        .lines()
        .filter(|l| l.starts_with("variant="))
        .map(|l| l.split_whitespace().next().unwrap().to_string())
        .collect();
    assert_eq!(variants, ["variant=fixed:naive_generation", "variant=random:0", "variant=controller"]);
}

#[test]
fn bench_usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path());
    assert_eq!(run(dir.path(), &["bench"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["bench", "--corpus", "none.jsonl"]).status.code(), Some(2));
    assert_eq!(
        run(dir.path(), &["bench", "--corpus", "corpus.jsonl", "--variants", "fixed:STOP"]).status.code(),
        Some(2)
    );
    assert_eq!(run(dir.path(), &["run-gen", "x", "--t-max", "0"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["run-gen", "x", "--noise-rate", "2"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn settings_layer_defaults_file_env_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("imagent.toml"),
        "[run]\nt_max = 2\nseed = 3\n\n[output]\nout_dir = \"from-file\"\n",
    )
    .unwrap();
    let never_stop = ["--script", "naive_generation", "--script", "naive_generation", "--script", "naive_generation"];

    let mut args = vec!["run-gen", "a red cube", "--run-id", "f"];
    args.extend(never_stop);
    let out = run(dir.path(), &args);
    let map = kv(&out);
    assert_eq!(map["steps"], "2", "file t_max applies");
    assert!(map["trace"].starts_with("from-file/"));

    let out = imagent(dir.path(), &args).env("IMAGENT_OUT_DIR", "from-env").env("IMAGENT_API_KEY", "hunter2").output().unwrap();
    let map = kv(&out);
    assert!(map["trace"].starts_with("from-env/"), "env beats file");
    let trace = fs::read_to_string(dir.path().join(&map["trace"])).unwrap();
    assert!(!trace.contains("hunter2"));
    let value: serde_json::Value = serde_json::from_str(&trace).unwrap();
    assert_eq!(value["trace"]["settings"]["backend"], "sim");
    assert_eq!(value["trace"]["config"]["seed"], 3);

    let mut flagged = args.clone();
    flagged.extend(["--out-dir", "from-flag", "--t-max", "3"]);
    let out = imagent(dir.path(), &flagged).env("IMAGENT_OUT_DIR", "from-env").output().unwrap();
    let map = kv(&out);
    assert!(map["trace"].starts_with("from-flag/"), "flag beats env");
    assert_eq!(map["steps"], "3");

    fs::write(dir.path().join("bad.toml"), "[run]\nwarp = 9\n").unwrap();
    assert_eq!(run(dir.path(), &["--config", "bad.toml", "run-gen", "x"]).status.code(), Some(2));
}

#[test]
fn served_simulation_passes_conformance_and_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut server = imagent(dir.path(), &["serve-sim", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let endpoint = line.trim().strip_prefix("listening=").unwrap().to_string();

    let out = run(dir.path(), &["conformance", "--endpoint", &endpoint, "--deterministic"]);
    let conformance = String::from_utf8(out.stdout.clone()).unwrap();
    let http_run = run(
        dir.path(),
        &["run-gen", "moldy bread", "--backend", "http", "--endpoint", &endpoint, "--out-dir", "runs", "--run-id", "h"],
    );
    let replayed = run(dir.path(), &["replay", "runs/h/trace.json"]);
    server.kill().unwrap();
    let _ = server.wait();

    assert_eq!(out.status.code(), Some(0), "{conformance}");
    assert!(conformance.lines().all(|l| !l.contains("result=fail")));
    assert_eq!(http_run.status.code(), Some(0), "{}", stderr(&http_run));
    assert_eq!(kv(&replayed)["verdict"], "identical");
}
