//! The `treeqa` command line.

use std::collections::HashMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::{BackendKind, ConfigError, RunConfig, WebModeSetting};
use crate::engine::{Engine, RunRecord};
use crate::eval::{evaluate, load_dataset, DatasetFormat, Example, Report};
use crate::knowledge::{parse_sources, KgStore};
use crate::llm::ResponseCache;
use crate::plan::{parse_art, serialize_art, validate_art};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ABORT: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "treeqa", version, about = "Answer complex questions over a KG, local text and the web")]
pub struct Cli {
    #[command(flatten)]
    pub opts: Opts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Opts {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Comma-separated subset of kg,text,web.
    #[arg(long, global = true)]
    pub sources: Option<String>,
    /// Passages per source and query.
    #[arg(long, global = true)]
    pub k: Option<usize>,
    /// Filter overlap threshold in [0, 1].
    #[arg(long, global = true)]
    pub t: Option<f64>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    /// Response script for the scripted backend.
    #[arg(long, global = true)]
    pub script: Option<PathBuf>,
    /// Response cache directory.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Write the run artifact for ask and exec-plan.
    #[arg(long, global = true)]
    pub trace: bool,
    /// Only run the first N dataset examples.
    #[arg(long, global = true)]
    pub limit: Option<usize>,
    /// Questions answered at once by `run`.
    #[arg(long, global = true)]
    pub concurrency: Option<usize>,
    /// Output directory for artifacts and reports.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// KG dump (JSONL).
    #[arg(long, global = true)]
    pub kg: Option<PathBuf>,
    /// Directory of local text documents.
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Directory of recorded web search responses (replayed).
    #[arg(long, global = true)]
    pub web_recordings: Option<PathBuf>,
    /// Chat model name for the live backend
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Base URL of an OpenAI-compatible chat endpoint
    #[arg(long, global = true)]
    pub base_url: Option<String>,
    /// LLM call budget per question
    #[arg(long, global = true)]
    pub max_llm_calls: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Plan and answer one question.
    Ask { question: String },
    /// Print the reasoning tree for a question without executing it.
    Plan { question: String },
    /// Validate and execute a stored plan document (`-` reads stdin).
    ExecPlan { plan: PathBuf },
    /// Answer every question of a dataset and write a report.
    Run {
        dataset: PathBuf,
        #[arg(long, default_value = "generic")]
        format: String,
    },
    /// Check a KG dump and print its counts.
    KgImport { dump: PathBuf },
    /// Inspect or empty the response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Rebuild a report from the artifacts of an earlier run.
    Report {
        dataset: PathBuf,
        #[arg(long, default_value = "generic")]
        format: String,
        /// Directory holding the per-question artifacts.
        #[arg(long)]
        runs: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum CacheAction {
    Stats,
    Clear,
}

/// A failed command: exit code and message.
#[derive(Debug)]
pub struct Exit(pub i32, pub String);

impl From<ConfigError> for Exit {
    fn from(e: ConfigError) -> Self {
        Exit(EXIT_USAGE, e.to_string())
    }
}

type Env<'a> = &'a (dyn Fn(&str) -> Option<String> + Sync);

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, env: Env, out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(&cli, env, out) {
        Ok(()) => EXIT_OK,
        Err(Exit(code, message)) => {
            let _ = writeln!(err, "error: {message}");
            code
        }
    }
}

/// Config file, then environment, then flags.
pub fn resolve_config(opts: &Opts, env: Env) -> Result<RunConfig, ConfigError> {
    let mut c = match &opts.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    c.apply_env(env)?;
    if let Some(s) = &opts.sources {
        c.sources.enabled = parse_sources(s).map_err(|e| ConfigError::Invalid(e.to_string()))?;
    }
    if let Some(k) = opts.k {
        c.k = k;
    }
    if let Some(t) = opts.t {
        c.t = t;
    }
    if let Some(b) = opts.backend {
        c.backend.kind = b;
    }
    if let Some(s) = &opts.script {
        c.backend.script = Some(s.clone());
        if opts.backend.is_none() {
            c.backend.kind = BackendKind::Scripted;
        }
    }
    if let Some(d) = &opts.cache {
        c.cache_dir = Some(d.clone());
    }
    if let Some(w) = opts.concurrency {
        c.concurrency = w;
    }
    if let Some(p) = &opts.kg {
        c.sources.kg = Some(p.clone());
    }
    if let Some(p) = &opts.corpus {
        c.sources.corpus = Some(p.clone());
    }
    if let Some(p) = &opts.web_recordings {
        c.sources.web_recordings = Some(p.clone());
        c.sources.web_mode = WebModeSetting::Replay;
    }
    if let Some(m) = &opts.model {
        c.backend.model = m.clone();
    }
    if let Some(u) = &opts.base_url {
        c.backend.base_url = u.clone();
    }
    if let Some(n) = opts.max_llm_calls {
        c.budget.max_llm_calls = Some(n);
    }
    Ok(c)
}

fn engine(opts: &Opts, env: Env) -> Result<(RunConfig, Engine), Exit> {
    let config = resolve_config(opts, env)?;
    let engine = config.build_engine(env)?;
    Ok((config, engine))
}

fn io_exit(what: &str, e: impl std::fmt::Display) -> Exit {
    Exit(EXIT_ABORT, format!("{what}: {e}"))
}

fn out_dir(opts: &Opts) -> PathBuf {
    opts.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

/// File stem for an example id: the id itself when it is filesystem-safe,
/// otherwise a sanitized prefix plus a digest.
pub fn artifact_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    if safe == id && !id.is_empty() && !id.starts_with('.') {
        safe
    } else {
        let digest = hex::encode(Sha256::digest(id.as_bytes()));
        format!("{}-{}", safe.chars().take(40).collect::<String>(), &digest[..12])
    }
}

fn question_name(question: &str) -> String {
    format!("ask-{}", &hex::encode(Sha256::digest(question.as_bytes()))[..12])
}

fn finish_record(record: &RunRecord, opts: &Opts, out: &mut (dyn Write + Send)) -> Result<(), Exit> {
    if opts.trace {
        let path = record
            .write(&out_dir(opts), &question_name(&record.question))
            .map_err(|e| io_exit("cannot write trace", e))?;
        log::info!("trace written to {}", path.display());
    }
    match &record.error {
        Some(e) => Err(Exit(EXIT_ABORT, e.clone())),
        None => {
            writeln!(out, "{}", record.prediction()).map_err(|e| io_exit("stdout", e))?;
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli, env: Env, out: &mut (dyn Write + Send)) -> Result<(), Exit> {
    let opts = &cli.opts;
    match &cli.command {
        Command::Ask { question } => {
            let (_, engine) = engine(opts, env)?;
            finish_record(&engine.answer(question), opts, out)
        }
        Command::Plan { question } => {
            let (_, engine) = engine(opts, env)?;
            let (art, _) = engine
                .plan(question, &engine.new_meter())
                .map_err(|e| Exit(EXIT_ABORT, e.to_string()))?;
            writeln!(out, "{}", serialize_art(&art)).map_err(|e| io_exit("stdout", e))
        }
        Command::ExecPlan { plan } => {
            let text = if plan.as_os_str() == "-" {
                std::io::read_to_string(std::io::stdin()).map_err(|e| io_exit("stdin", e))?
            } else {
                std::fs::read_to_string(plan).map_err(|e| Exit(EXIT_USAGE, format!("{}: {e}", plan.display())))?
            };
            let art = parse_art(&text).map_err(|e| Exit(EXIT_USAGE, e.to_string()))?;
            let violations = validate_art(&art);
            if !violations.is_empty() {
                let lines: Vec<String> = violations.iter().map(ToString::to_string).collect();
                return Err(Exit(EXIT_USAGE, format!("invalid plan:\n{}", lines.join("\n"))));
            }
            let (_, engine) = engine(opts, env)?;
            finish_record(&engine.answer_with_plan(&art), opts, out)
        }
        Command::Run { dataset, format } => {
            let format: DatasetFormat = format.parse().map_err(|e: String| Exit(EXIT_USAGE, e))?;
            let mut examples = load_dataset(dataset, format).map_err(|e| Exit(EXIT_USAGE, e.to_string()))?;
            if let Some(n) = opts.limit {
                examples.truncate(n);
            }
            let (config, engine) = engine(opts, env)?;
            let dir = out_dir(opts);
            let report = run_batch(&engine, &examples, &dir, config.concurrency, out)?;
            write_report(&report, &dir)?;
            write!(out, "{}", report.summary()).map_err(|e| io_exit("stdout", e))
        }
        Command::KgImport { dump } => {
            let store = KgStore::load_jsonl(dump).map_err(|e| Exit(EXIT_USAGE, e.to_string()))?;
            let stats = store.stats();
            writeln!(
                out,
                "{}",
                serde_json::json!({"entities": stats.entities, "triples": stats.triples, "attributes": stats.attributes})
            )
            .map_err(|e| io_exit("stdout", e))
        }
        Command::Cache { action } => {
            let config = resolve_config(opts, env)?;
            let dir = config
                .cache_dir
                .ok_or_else(|| Exit(EXIT_USAGE, "no cache directory configured (use --cache)".into()))?;
            let cache = ResponseCache::open(&dir).map_err(|e| io_exit("cache", e))?;
            let line = match action {
                CacheAction::Stats => format!("{} entries in {}", cache.len().map_err(|e| io_exit("cache", e))?, dir.display()),
                CacheAction::Clear => format!("removed {} entries", cache.clear().map_err(|e| io_exit("cache", e))?),
            };
            writeln!(out, "{line}").map_err(|e| io_exit("stdout", e))
        }
        Command::Report { dataset, format, runs } => {
            let format: DatasetFormat = format.parse().map_err(|e: String| Exit(EXIT_USAGE, e))?;
            let mut examples = load_dataset(dataset, format).map_err(|e| Exit(EXIT_USAGE, e.to_string()))?;
            if let Some(n) = opts.limit {
                examples.truncate(n);
            }
            let report = collect_report(&examples, runs, false)?;
            if let Some(dir) = &opts.out {
                write_report(&report, dir)?;
            }
            write!(out, "{}", report.summary()).map_err(|e| io_exit("stdout", e))
        }
    }
}

fn artifact_path(runs: &Path, id: &str) -> PathBuf {
    runs.join(format!("{}.json", artifact_name(id)))
}

fn completed(runs: &Path, id: &str) -> bool {
    RunRecord::read(&artifact_path(runs, id)).is_ok_and(|r| r.succeeded() && r.id.as_deref() == Some(id))
}

/// Answers every example that has no successful artifact under
/// `dir/runs`, then scores all of them. Failed runs are scored with an
/// empty prediction and listed in `failed`.
pub fn run_batch(
    engine: &Engine,
    examples: &[Example],
    dir: &Path,
    width: usize,
    out: &mut (dyn Write + Send),
) -> Result<Report, Exit> {
    let runs = dir.join("runs");
    std::fs::create_dir_all(&runs).map_err(|e| io_exit("cannot create output directory", e))?;
    let todo: Vec<&Example> = examples.iter().filter(|e| !completed(&runs, &e.id)).collect();
    if todo.len() < examples.len() {
        log::info!("skipping {} completed examples", examples.len() - todo.len());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(width.max(1))
        .build()
        .map_err(|e| io_exit("thread pool", e))?;
    let console = Mutex::new(out);
    let written: Result<(), Exit> = pool.install(|| {
        todo.par_iter().try_for_each(|ex| {
            let mut record = engine.answer(&ex.question);
            record.id = Some(ex.id.clone());
            record
                .write(&runs, &artifact_name(&ex.id))
                .map_err(|e| io_exit("cannot write artifact", e))?;
            let f1 = crate::eval::token_f1(&record.prediction(), &ex.gold_answers);
            let status = record.error.as_deref().map(|e| format!("  [failed: {e}]")).unwrap_or_default();
            let mut console = console.lock().expect("console lock");
            writeln!(console, "{}\t{f1:.4}\t{}{status}", ex.id, record.prediction()).map_err(|e| io_exit("stdout", e))
        })
    });
    written?;
    collect_report(examples, &runs, true)
}

/// Scores `examples` from the artifacts in `runs`. With `strict` unset,
/// missing artifacts count as failures instead of aborting.
fn collect_report(examples: &[Example], runs: &Path, strict: bool) -> Result<Report, Exit> {
    let mut predictions = HashMap::new();
    let mut traces = HashMap::new();
    let mut failed = Vec::new();
    for ex in examples {
        let path = artifact_path(runs, &ex.id);
        match RunRecord::read(&path) {
            Ok(record) => {
                if !record.succeeded() {
                    failed.push(ex.id.clone());
                }
                predictions.insert(ex.id.clone(), record.prediction());
                traces.insert(ex.id.clone(), record.counters);
            }
            Err(e) if strict => return Err(io_exit(&format!("cannot read {}", path.display()), e)),
            Err(_) => {
                failed.push(ex.id.clone());
                predictions.insert(ex.id.clone(), String::new());
            }
        }
    }
    let mut report = evaluate(examples, &predictions, Some(&traces)).map_err(|e| io_exit("evaluate", e))?;
    report.failed = failed;
    Ok(report)
}

fn write_report(report: &Report, dir: &Path) -> Result<(), Exit> {
    std::fs::create_dir_all(dir).map_err(|e| io_exit("cannot create output directory", e))?;
    let text = serde_json::to_string_pretty(report).expect("reports serialize");
    std::fs::write(dir.join("report.json"), text + "\n").map_err(|e| io_exit("cannot write report", e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn artifact_names_are_safe_and_distinct() {
        assert_eq!(artifact_name("5a8b57f2"), "5a8b57f2");
        let a = artifact_name("a/b");
        let b = artifact_name("a?b");
        assert!(a.starts_with("a_b-") && b.starts_with("a_b-"));
        assert_ne!(a, b);
        assert_ne!(artifact_name(".."), "..");
    }

    #[test]
    fn flags_override_environment() {
        let opts = Opts {
            k: Some(9),
            sources: Some("text".into()),
            ..Opts::default()
        };
        let env = |k: &str| match k {
            "TREEQA_K" => Some("4".to_string()),
            "TREEQA_T" => Some("0.7".to_string()),
            _ => None,
        };
        let c = resolve_config(&opts, &env).unwrap();
        assert_eq!((c.k, c.t), (9, 0.7));
    }

    #[test]
    fn usage_errors_exit_two() {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let none = |_: &str| None;
        assert_eq!(run(["treeqa", "frobnicate"], &none, &mut out, &mut err), EXIT_USAGE);
        assert_eq!(run(["treeqa", "--help"], &none, &mut out, &mut err), EXIT_OK);
        assert!(String::from_utf8_lossy(&out).contains("exec-plan"));
    }
}
