//! Command-line interface: `run`, `replay`, `report`, and `sample`.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rust_decimal::Decimal;

use crate::backend::{BackendBinding, BackendKind, HttpChatBackend, ScriptCursors, ScriptedBackend, ScriptedResponses};
use crate::config::ConfigFile;
use crate::dataset::{load_corpus, sample_indices, sample_subset, SamplePlan};
use crate::judge::Rubric;
use crate::protocol::{ObjectionPolicy, ProtocolVariant, RolePromptSet, RoundBudget, StopRule};
use crate::runner::{
    self, emit_report, percent_1dp, read_items_csv, replay_traces, run_method, Method, RunConfig,
};

#[derive(Parser)]
#[command(name = "forp", version, about = "Objection-revision prompting orchestrator and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a method over a corpus and emit report files.
    Run(RunArgs),
    /// Recompute verdicts from persisted traces.
    Replay(ReplayArgs),
    /// Merge item detail CSVs into a combined report.
    Report(ReportArgs),
    /// Emit the task ids a sample plan selects.
    Sample(SampleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Single,
    Cot,
    For,
}

#[derive(Args)]
struct RunArgs {
    /// Method to evaluate.
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Objection-revision rounds (`for` method only).
    #[arg(long, default_value_t = 3)]
    rounds: u32,
    /// Host schedule: final-host or per-round-host.
    #[arg(long, default_value = "final-host")]
    variant: String,
    /// Corpus JSONL file or directory of shards.
    #[arg(long)]
    corpus: PathBuf,
    /// Evaluate a seeded uniform subsample of this size.
    #[arg(long)]
    sample_size: Option<usize>,
    /// Sampling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Backend TOML config (role bindings, prompts, rubrics).
    #[arg(long)]
    backend: Option<PathBuf>,
    /// Judge config path, or `off`.
    #[arg(long, default_value = "off")]
    judge: String,
    /// Scripted-mock transcript driving every role.
    #[arg(long)]
    mock: Option<PathBuf>,
    /// Output directory for report files and traces.
    #[arg(long)]
    out: PathBuf,
    /// Max concurrent tasks.
    #[arg(long, default_value_t = 4)]
    parallel: usize,
    /// Reject non-question Debater output (retry once, then abort).
    #[arg(long)]
    strict_objections: bool,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trace file, or a directory of trace files.
    trace: PathBuf,
    /// Corpus supplying gold answers.
    #[arg(long)]
    gold: PathBuf,
    /// Judge config path, or `off` (default: tolerance comparison).
    #[arg(long, default_value = "off")]
    judge: String,
}

#[derive(Args)]
struct ReportArgs {
    /// items.csv files from previous runs.
    #[arg(long, required = true, num_args = 1..)]
    items: Vec<PathBuf>,
    /// Output directory for the merged report.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write ids here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Report(args) => cmd_report(args),
        Command::Sample(args) => cmd_sample(args),
    };
    match result {
        Ok(()) => 0,
        Err(message) => {
            eprintln!("error: {message}");
            1
        }
    }
}

fn parse_judge_binding(judge: &str) -> Result<Option<BackendBinding>, String> {
    if judge == "off" {
        return Ok(None);
    }
    let config = ConfigFile::load(judge).map_err(|e| format!("judge config: {e}"))?;
    let section = config
        .judge
        .as_ref()
        .or(config.defender.as_ref())
        .ok_or_else(|| "judge config has no [judge] section".to_string())?;
    Ok(Some(section.resolve()))
}

fn mock_binding(script: &Path) -> BackendBinding {
    BackendBinding {
        kind: BackendKind::ScriptedMock,
        endpoint: String::new(),
        model_id: String::new(),
        auth_env: None,
        decoding: Default::default(),
        timeout_secs: 120,
        max_attempts: 3,
        base_backoff_ms: 250,
        script_path: Some(script.to_string_lossy().into_owned()),
    }
}

fn build_run_config(args: &RunArgs) -> Result<RunConfig, String> {
    let method = match args.method {
        MethodArg::Single => Method::SinglePrompt,
        MethodArg::Cot => Method::Cot,
        MethodArg::For => {
            let variant: ProtocolVariant = args.variant.parse()?;
            Method::ForPrompting {
                variant,
                stop_rule: StopRule::FixedRounds(RoundBudget(args.rounds)),
            }
        }
    };

    let (file, prompts, rubrics) = match &args.backend {
        Some(path) => {
            let file = ConfigFile::load(path).map_err(|e| format!("backend config: {e}"))?;
            let prompts = file.role_prompts().map_err(|e| e.to_string())?;
            let rubrics = file.rubric_set();
            (Some(file), prompts, rubrics)
        }
        None => (None, RolePromptSet::default(), Rubric::default_set()),
    };

    let (defender, debater, host, cot_override) = match (&args.mock, &file) {
        (Some(script), _) => {
            let b = mock_binding(script);
            (b.clone(), b.clone(), b, None)
        }
        (None, Some(file)) => {
            let resolve = |role: &str| -> Result<BackendBinding, String> {
                file.binding_for_role(role)
                    .map(|s| s.resolve())
                    .ok_or_else(|| format!("backend config has no [{role}] or [defender] section"))
            };
            let cot_override = file.cot.as_ref().map(|s| s.resolve());
            (resolve("defender")?, resolve("debater")?, resolve("host")?, cot_override)
        }
        (None, None) => {
            return Err("either --mock SCRIPT or --backend CONFIG is required".into());
        }
    };

    let judge = parse_judge_binding(&args.judge)?;

    Ok(RunConfig {
        method,
        defender,
        debater,
        host,
        cot_override,
        judge,
        prompts,
        rubrics,
        sample: args.sample_size.map(|size| SamplePlan { size, seed: args.seed }),
        objection_policy: if args.strict_objections {
            ObjectionPolicy::Strict
        } else {
            ObjectionPolicy::Lenient
        },
        cot_instruction: runner::DEFAULT_COT_INSTRUCTION.into(),
        parallelism: args.parallel,
        output_dir: args.out.clone(),
    })
}

fn cmd_run(args: RunArgs) -> Result<(), String> {
    let config = build_run_config(&args)?;
    let corpus = load_corpus(&args.corpus).map_err(|e| e.to_string())?;
    let corpus = match &config.sample {
        Some(plan) => sample_subset(&corpus, plan).map_err(|e| e.to_string())?,
        None => corpus,
    };
    if corpus.is_empty() {
        return Err("corpus is empty".into());
    }

    let (report, items) = run_method(&corpus, &config).map_err(|e| e.to_string())?;
    emit_report(&[report.clone()], &items, &config.output_dir).map_err(|e| e.to_string())?;

    println!(
        "{}: {}/{} correct ({}%), {} excluded; report files in {}",
        report.method,
        report.correct_count,
        report.n_items,
        percent_1dp(report.correct_count, report.n_items),
        report.excluded_items,
        config.output_dir.display()
    );
    Ok(())
}

fn trace_paths(root: &Path) -> Result<Vec<PathBuf>, String> {
    if root.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| e.to_string())?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(format!("no .jsonl traces under {}", root.display()));
        }
        Ok(paths)
    } else {
        Ok(vec![root.to_path_buf()])
    }
}

fn cmd_replay(args: ReplayArgs) -> Result<(), String> {
    let corpus = load_corpus(&args.gold).map_err(|e| e.to_string())?;
    let gold_by_task: HashMap<String, Decimal> = corpus
        .iter()
        .filter_map(|t| t.gold_answer.map(|g| (t.task_id.clone(), g)))
        .collect();
    let judge_binding = parse_judge_binding(&args.judge)?;
    let judge_backend: Option<Box<dyn crate::backend::ChatBackend>> = match judge_binding {
        None => None,
        Some(binding) if binding.kind == BackendKind::ScriptedMock => {
            let script = ScriptedResponses::load_script(
                binding.script_path.as_deref().ok_or("scripted judge needs script_path")?,
            )
            .map_err(|e| e.to_string())?;
            Some(Box::new(ScriptedBackend::new(
                std::sync::Arc::new(script),
                ScriptCursors::new(),
                "judge",
            )))
        }
        Some(binding) => {
            Some(Box::new(HttpChatBackend::new(binding).map_err(|e| e.to_string())?))
        }
    };

    let paths = trace_paths(&args.trace)?;
    let rows = replay_traces(&paths, &gold_by_task, judge_backend.as_deref())
        .map_err(|e| e.to_string())?;

    let mut correct = 0usize;
    let mut counted = 0usize;
    println!("task_id\taccuracy\tpredicted\tgold\tpath\tsource");
    for row in &rows {
        let bit = row.accuracy_bit.map(|b| b.to_string()).unwrap_or_else(|| "-".into());
        let pred = row.predicted.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
        let gold = row.gold.map(|g| g.to_string()).unwrap_or_else(|| "-".into());
        println!("{}\t{}\t{}\t{}\t{}\t{}", row.task_id, bit, pred, gold, row.extraction_path, row.source);
        if let Some(b) = row.accuracy_bit {
            counted += 1;
            correct += b as usize;
        }
    }
    println!("replayed accuracy: {correct}/{counted} ({}%)", percent_1dp(correct, counted));
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<(), String> {
    let mut by_method: HashMap<String, Vec<crate::judge::ScoreCard>> = HashMap::new();
    for path in &args.items {
        for (method, card) in read_items_csv(path).map_err(|e| e.to_string())? {
            by_method.entry(method).or_default().push(card);
        }
    }
    if by_method.is_empty() {
        return Err("no score cards found in the given items files".into());
    }
    let mut methods: Vec<String> = by_method.keys().cloned().collect();
    methods.sort();
    let mut reports = Vec::new();
    for method in methods {
        let cards = &by_method[&method];
        reports.push(runner::aggregate(&method, cards).map_err(|e| e.to_string())?);
    }
    fs::create_dir_all(&args.out).map_err(|e| e.to_string())?;
    emit_report(&reports, &[], &args.out).map_err(|e| e.to_string())?;
    print!("{}", runner::render_summary(&reports));
    Ok(())
}

fn cmd_sample(args: SampleArgs) -> Result<(), String> {
    let corpus = load_corpus(&args.corpus).map_err(|e| e.to_string())?;
    let plan = SamplePlan { size: args.size, seed: args.seed };
    let indices = sample_indices(corpus.len(), &plan).map_err(|e| e.to_string())?;
    let ids: Vec<&str> = indices.iter().map(|&i| corpus[i].task_id.as_str()).collect();
    let text = ids.join("\n") + "\n";
    match &args.out {
        Some(path) => fs::write(path, text).map_err(|e| e.to_string())?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Shared by tests that need a tiny gold corpus on disk.
pub fn write_corpus_fixture(path: &Path, tasks: &[(&str, &str)]) -> std::io::Result<()> {
    let mut text = String::new();
    for (question, answer) in tasks {
        text.push_str(&serde_json::json!({ "question": question, "answer": answer }).to_string());
        text.push('\n');
    }
    fs::write(path, text)
}
