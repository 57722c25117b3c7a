use std::path::{Path, PathBuf};

use treeqa_core::cli::{run, EXIT_ABORT, EXIT_OK, EXIT_USAGE};
use treeqa_core::engine::RunRecord;
use treeqa_core::eval::Report;
use treeqa_core::plan::parse_art;

const QUESTION: &str = "How many studio albums has Shakira released between 2000 and 2010?";

fn data(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(rel).display().to_string()
}

fn no_env(_: &str) -> Option<String> {
    None
}

struct Outcome {
    code: i32,
    out: String,
    err: String,
}

fn treeqa(args: &[&str]) -> Outcome {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["treeqa"];
    argv.extend_from_slice(args);
    let code = run(argv, &no_env, &mut out, &mut err);
    Outcome {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn scripted() -> Vec<String> {
    vec![
        "--script".into(),
        data("shakira/script.json"),
        "--sources".into(),
        "text".into(),
        "--corpus".into(),
        data("shakira/corpus"),
    ]
}

fn with(base: &[String], more: &[&str]) -> Outcome {
    let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
    args.extend_from_slice(more);
    treeqa(&args)
}

#[test]
fn ask_answers_under_the_script() {
    let o = with(&scripted(), &["ask", QUESTION]);
    assert_eq!((o.code, o.out.as_str()), (EXIT_OK, "5\n"), "{}", o.err);
}

#[test]
fn ask_without_sources_is_a_config_error() {
    let o = treeqa(&["--script", &data("shakira/script.json"), "ask", QUESTION]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(o.err.contains("no knowledge source"), "{}", o.err);
}

#[test]
fn ask_trace_writes_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = with(&scripted(), &["--trace", "--out", &out, "ask", QUESTION]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let files: Vec<PathBuf> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 1);
    let record = RunRecord::read(&files[0]).unwrap();
    assert_eq!(record.prediction(), "5");
    assert_eq!(record.outcomes.len(), 6);
}

#[test]
fn plan_then_exec_plan_matches_ask() {
    let o = with(&scripted(), &["plan", QUESTION]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let expected = parse_art(&std::fs::read_to_string(data("shakira/plan.json")).unwrap()).unwrap();
    assert_eq!(parse_art(&o.out).unwrap(), expected);

    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    std::fs::write(&plan, &o.out).unwrap();
    let exec = with(&scripted(), &["exec-plan", plan.to_str().unwrap()]);
    let ask = with(&scripted(), &["ask", QUESTION]);
    assert_eq!(exec.code, EXIT_OK, "{}", exec.err);
    assert_eq!(exec.out, ask.out);
}

#[test]
fn exec_plan_reports_violations() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("bad.json");
    std::fs::write(
        &plan,
        r#"{"question": "q", "nodes": [{"idx": 0, "q": "q", "children": [1]}, {"idx": 1, "q": "a", "children": [2], "op": "Search(\"x\")"}, {"idx": 2, "q": "b", "op": "Search(\"y\")"}]}"#,
    )
    .unwrap();
    let o = with(&scripted(), &["exec-plan", plan.to_str().unwrap()]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(o.err.contains("node 1"), "{}", o.err);
}

#[test]
fn unanswerable_question_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("empty.json");
    std::fs::write(&script, "[]").unwrap();
    let o = treeqa(&[
        "--script",
        script.to_str().unwrap(),
        "--sources",
        "text",
        "--corpus",
        &data("shakira/corpus"),
        "ask",
        QUESTION,
    ]);
    assert_eq!(o.code, EXIT_ABORT);
}

fn report(dir: &Path) -> (String, Report) {
    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let report = serde_json::from_str(&text).unwrap();
    (text, report)
}

#[test]
fn batch_run_scores_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = with(&scripted(), &["--out", &out, "run", &data("batch.jsonl")]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert_eq!(o.out.lines().filter(|l| l.contains('\t')).count(), 3);
    let (_, r) = report(dir.path());
    // "5" against "5", "five albums", and the better of "5 albums" / "five".
    let f1 = [1.0, 0.0, 2.0 * 1.0 * 0.5 / 1.5];
    assert!((r.overall - f1.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    assert!((r.per_type["bridge"].f1 - f1[2] / 2.0).abs() < 1e-12);
    assert_eq!(r.counters.as_ref().unwrap().llm_calls, 7.0);

    std::fs::remove_file(dir.path().join("runs/s2.json")).unwrap();
    let again = with(&scripted(), &["--out", &out, "run", &data("batch.jsonl")]);
    let executed: Vec<&str> = again.out.lines().filter(|l| l.contains('\t')).collect();
    assert_eq!(executed.len(), 1);
    assert!(executed[0].starts_with("s2\t"));
    assert_eq!(report(dir.path()).1, r);
}

#[test]
fn limit_runs_a_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    let o = with(&scripted(), &["--out", &out, "--limit", "1", "run", &data("batch.jsonl")]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert_eq!(std::fs::read_dir(dir.path().join("runs")).unwrap().count(), 1);
    assert_eq!(report(dir.path()).1.count, 1);
}

#[test]
fn concurrency_does_not_change_the_report() {
    let reports: Vec<String> = ["1", "3"]
        .iter()
        .map(|w| {
            let dir = tempfile::tempdir().unwrap();
            let out = dir.path().display().to_string();
            let o = with(&scripted(), &["--out", &out, "--concurrency", w, "run", &data("batch.jsonl")]);
            assert_eq!(o.code, EXIT_OK, "{}", o.err);
            report(dir.path()).0
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn report_rebuilds_from_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().display().to_string();
    with(&scripted(), &["--out", &out, "run", &data("batch.jsonl")]);
    let runs = dir.path().join("runs").display().to_string();
    let o = treeqa(&["report", &data("batch.jsonl"), "--runs", &runs]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    assert!(o.out.starts_with("overall  F1  55.56  n=3"), "{}", o.out);
}

#[test]
fn kg_import_counts() {
    let o = treeqa(&["kg-import", &data("people.jsonl")]);
    assert_eq!(o.code, EXIT_OK, "{}", o.err);
    let stats: serde_json::Value = serde_json::from_str(&o.out).unwrap();
    let text = std::fs::read_to_string(data("people.jsonl")).unwrap();
    let attributes: usize = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter_map(|v| v.get("attributes").and_then(|a| a.as_array()).map(Vec::len))
        .sum();
    assert_eq!(stats, serde_json::json!({"entities": 10, "triples": 2, "attributes": attributes}));

    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let o = treeqa(&["kg-import", empty.to_str().unwrap()]);
    assert_eq!(o.out.trim(), r#"{"attributes":0,"entities":0,"triples":0}"#);

    let dangling = dir.path().join("dangling.jsonl");
    std::fs::write(&dangling, "{\"id\": \"Q1\", \"label\": \"A\"}\n{\"h\": \"Q1\", \"r\": \"knows\", \"t\": \"Q2\"}\n").unwrap();
    let o = treeqa(&["kg-import", dangling.to_str().unwrap()]);
    assert_eq!(o.code, EXIT_USAGE);
    assert!(o.err.contains('2'), "{}", o.err);
}

#[test]
fn cache_commands() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().display().to_string();
    with(&scripted(), &["--cache", &cache, "ask", QUESTION]);
    let stats = treeqa(&["--cache", &cache, "cache", "stats"]);
    assert!(stats.out.starts_with("7 entries"), "{}", stats.out);
    let cleared = treeqa(&["--cache", &cache, "cache", "clear"]);
    assert_eq!(cleared.out.trim(), "removed 7 entries");
    assert_eq!(treeqa(&["cache", "stats"]).code, EXIT_USAGE);
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_treeqa");
    let status = std::process::Command::new(bin).args(["ask", "q"]).env_remove("TREEQA_SOURCES").status().unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
    let out = std::process::Command::new(bin).args(scripted()).args(["ask", QUESTION]).output().unwrap();
    assert_eq!(String::from_utf8_lossy(&out.stdout), "5\n");
}
