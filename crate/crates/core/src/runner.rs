//! Method runners (single-prompt, chain-of-thought, objection-revision),
//! batch evaluation, aggregation, and report emission.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendBinding, BackendError, BackendKind, ChatBackend, ChatMessage, HttpChatBackend,
    ScriptCursors, ScriptError, ScriptedBackend, ScriptedResponses,
};
use crate::config::fingerprint_value;
use crate::dataset::{CorpusError, SampleError, Task};
use crate::extraction::{PredictionRecord, Verdict, VerdictSource};
use crate::judge::{judge_accuracy, judge_rubric, Rubric, RubricKind, RubricOutcome, ScoreCard};
use crate::protocol::{
    run_protocol, BackendSet, ObjectionPolicy, ProtocolOptions, ProtocolVariant, RolePromptSet,
    RunIdentity, StopRule,
};
use crate::trace::{
    read_jsonl, JsonlSink, MessageType, Role, Trace, TraceError, TraceSink, TraceStatus,
};

/// Default instruction appended to the task for the CoT baseline.
pub const DEFAULT_COT_INSTRUCTION: &str =
    "Think step by step, then state the final numeric answer on the last line.";

/// Evaluated method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One direct call per task, no explicit reasoning elicitation.
    SinglePrompt,
    /// One call per task with a step-elicitation instruction.
    Cot,
    /// The objection-revision protocol.
    ForPrompting { variant: ProtocolVariant, stop_rule: StopRule },
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Self::SinglePrompt => "single",
            Self::Cot => "cot",
            Self::ForPrompting { .. } => "for",
        }
    }
}

/// Full batch-run configuration. `output_dir` and `parallelism` are
/// execution details and excluded from the fingerprint.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub method: Method,
    pub defender: BackendBinding,
    pub debater: BackendBinding,
    pub host: BackendBinding,
    pub cot_override: Option<BackendBinding>,
    pub judge: Option<BackendBinding>,
    pub prompts: RolePromptSet,
    pub rubrics: Vec<Rubric>,
    pub sample: Option<crate::dataset::SamplePlan>,
    pub objection_policy: ObjectionPolicy,
    pub cot_instruction: String,
    #[serde(skip)]
    pub parallelism: usize,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

impl RunConfig {
    /// Scripted-mock configuration: every role replays `script_path`.
    pub fn mock(method: Method, script_path: impl Into<String>, output_dir: impl Into<PathBuf>) -> Self {
        let script_path = script_path.into();
        let binding = BackendBinding {
            kind: BackendKind::ScriptedMock,
            endpoint: String::new(),
            model_id: String::new(),
            auth_env: None,
            decoding: Default::default(),
            timeout_secs: 120,
            max_attempts: 3,
            base_backoff_ms: 250,
            script_path: Some(script_path),
        };
        Self {
            method,
            defender: binding.clone(),
            debater: binding.clone(),
            host: binding,
            cot_override: None,
            judge: None,
            prompts: RolePromptSet::default(),
            rubrics: Rubric::default_set(),
            sample: None,
            objection_policy: ObjectionPolicy::Lenient,
            cot_instruction: DEFAULT_COT_INSTRUCTION.into(),
            parallelism: 4,
            output_dir: output_dir.into(),
        }
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_value(self)
    }

    fn judge_label(&self) -> String {
        match &self.judge {
            None => "off".into(),
            Some(b) if b.kind == BackendKind::ScriptedMock => "scripted_mock".into(),
            Some(b) => b.model_id.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Script(#[from] ScriptError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("no score cards to aggregate")]
    EmptyInput,
    #[error("configuration error: {0}")]
    Config(String),
}

/// Per-item evaluation result, as written to `items.csv`.
#[derive(Debug, Clone)]
pub struct ItemResult {
    pub method: String,
    pub task_id: String,
    pub trace_status: TraceStatus,
    /// Outside the accuracy denominator: the run aborted with nothing
    /// extractable, or the task has no gold answer.
    pub excluded: bool,
    pub record: PredictionRecord,
    pub gold: Option<Decimal>,
    pub card: Option<ScoreCard>,
}

/// Aggregated per-method metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub n_items: usize,
    pub correct_count: usize,
    pub mean_accuracy: f64,
    pub mean_reasoning: Option<f64>,
    pub mean_coherence: Option<f64>,
    pub mean_holistic: Option<f64>,
    pub missing_reasoning: usize,
    pub missing_coherence: usize,
    pub missing_holistic: usize,
    pub excluded_items: usize,
    pub cards: Vec<ScoreCard>,
}

impl MethodReport {
    pub fn mean_for(&self, kind: RubricKind) -> Option<f64> {
        match kind {
            RubricKind::Reasoning => self.mean_reasoning,
            RubricKind::Coherence => self.mean_coherence,
            RubricKind::Holistic => self.mean_holistic,
        }
    }

    pub fn missing_for(&self, kind: RubricKind) -> usize {
        match kind {
            RubricKind::Reasoning => self.missing_reasoning,
            RubricKind::Coherence => self.missing_coherence,
            RubricKind::Holistic => self.missing_holistic,
        }
    }
}

/// Accuracy percentage at one decimal place, Table-style.
pub fn percent_1dp(correct: usize, total: usize) -> String {
    if total == 0 {
        return "-".into();
    }
    format!("{:.1}", 100.0 * correct as f64 / total as f64)
}

/// Folds score cards into a method report: exact-ratio accuracy, scalar
/// means over present values, and missing-value counts.
pub fn aggregate(method: &str, cards: &[ScoreCard]) -> Result<MethodReport, RunError> {
    if cards.is_empty() {
        return Err(RunError::EmptyInput);
    }
    let n_items = cards.len();
    let correct_count = cards.iter().filter(|c| c.accuracy_bit == 1).count();
    let mean_accuracy = correct_count as f64 / n_items as f64;

    let mut means = [None; 3];
    let mut missing = [0usize; 3];
    for (slot, kind) in RubricKind::ALL.iter().enumerate() {
        let values: Vec<f64> = cards.iter().filter_map(|c| c.rubric_value(*kind)).collect();
        missing[slot] = n_items - values.len();
        if !values.is_empty() {
            means[slot] = Some(values.iter().sum::<f64>() / values.len() as f64);
        }
    }

    Ok(MethodReport {
        method: method.to_string(),
        n_items,
        correct_count,
        mean_accuracy,
        mean_reasoning: means[0],
        mean_coherence: means[1],
        mean_holistic: means[2],
        missing_reasoning: missing[0],
        missing_coherence: missing[1],
        missing_holistic: missing[2],
        excluded_items: 0,
        cards: cards.to_vec(),
    })
}

/// Resolved backends for a batch. Scripted bindings share one loaded
/// script; every task replays it from index zero with fresh cursors.
pub struct BackendProvider {
    defender: RoleSource,
    debater: RoleSource,
    host: RoleSource,
    solver: RoleSource,
    judge: Option<RoleSource>,
}

enum RoleSource {
    Scripted { script: Arc<ScriptedResponses>, role: &'static str },
    Live(Arc<dyn ChatBackend>),
}

impl RoleSource {
    fn for_task(&self, cursors: &Arc<ScriptCursors>) -> Arc<dyn ChatBackend> {
        match self {
            Self::Scripted { script, role } => {
                Arc::new(ScriptedBackend::new(script.clone(), cursors.clone(), *role))
            }
            Self::Live(backend) => backend.clone(),
        }
    }
}

/// Role backends for one task's run.
pub struct TaskBackends {
    pub set: BackendSet,
    pub solver: Arc<dyn ChatBackend>,
    pub judge: Option<Arc<dyn ChatBackend>>,
}

impl BackendProvider {
    pub fn new(config: &RunConfig) -> Result<Self, RunError> {
        let mut scripts: HashMap<String, Arc<ScriptedResponses>> = HashMap::new();
        let mut source = |binding: &BackendBinding, role: &'static str| -> Result<RoleSource, RunError> {
            binding.validate()?;
            match binding.kind {
                BackendKind::ScriptedMock => {
                    let path = binding.script_path.clone().expect("validated above");
                    let script = match scripts.get(&path) {
                        Some(s) => s.clone(),
                        None => {
                            let loaded = Arc::new(ScriptedResponses::load_script(&path)?);
                            scripts.insert(path, loaded.clone());
                            loaded
                        }
                    };
                    Ok(RoleSource::Scripted { script, role })
                }
                _ => Ok(RoleSource::Live(Arc::new(HttpChatBackend::new(binding.clone())?))),
            }
        };

        let defender = source(&config.defender, "defender")?;
        let debater = source(&config.debater, "debater")?;
        let host = source(&config.host, "host")?;
        let solver = match (&config.method, &config.cot_override) {
            (Method::Cot, Some(binding)) => source(binding, "defender")?,
            _ => source(&config.defender, "defender")?,
        };
        let judge = match &config.judge {
            Some(binding) => Some(source(binding, "judge")?),
            None => None,
        };
        Ok(Self { defender, debater, host, solver, judge })
    }

    /// Fresh per-task view; scripted roles share one cursor set so the
    /// call sequence within the task is serialized.
    pub fn task_backends(&self) -> TaskBackends {
        let cursors = ScriptCursors::new();
        TaskBackends {
            set: BackendSet {
                defender: self.defender.for_task(&cursors),
                debater: self.debater.for_task(&cursors),
                host: self.host.for_task(&cursors),
            },
            solver: self.solver.for_task(&cursors),
            judge: self.judge.as_ref().map(|j| j.for_task(&cursors)),
        }
    }

    /// The loaded script behind the defender role, when mocked.
    pub fn script(&self) -> Option<Arc<ScriptedResponses>> {
        match &self.defender {
            RoleSource::Scripted { script, .. } => Some(script.clone()),
            RoleSource::Live(_) => None,
        }
    }
}

fn push_turn(
    trace: &mut Trace,
    sink: &mut dyn TraceSink,
    role: Role,
    message_type: MessageType,
    round: u32,
    content: String,
    usage: Option<crate::backend::TokenUsage>,
) -> Result<(), TraceError> {
    trace.push_next(role, message_type, round, content, usage)?;
    let turn = trace.turns.last().expect("turn just pushed").clone();
    sink.on_turn(trace, &turn)
}

/// One-call baseline: the reply is recorded as the Defender answer and
/// mirrored into the final-answer slot (no extra model call) so the trace
/// satisfies the complete-run grammar.
fn run_baseline(
    task: &Task,
    identity: RunIdentity,
    solver: &dyn ChatBackend,
    cot_instruction: Option<&str>,
    sink: &mut dyn TraceSink,
) -> Trace {
    let mut trace = Trace::new(identity.run_id, identity.task_id, identity.config_fingerprint);
    let outcome = (|| -> Result<(), TraceOrBackend> {
        push_turn(&mut trace, sink, Role::User, MessageType::TaskStatement, 0, task.prompt.clone(), None)?;
        let user = match cot_instruction {
            Some(instr) => format!("{}\n\n{instr}", task.prompt),
            None => task.prompt.clone(),
        };
        let completion = solver.complete(&[ChatMessage::user(user)])?;
        push_turn(
            &mut trace,
            sink,
            Role::Defender,
            MessageType::Answer,
            0,
            completion.text.clone(),
            completion.usage,
        )?;
        push_turn(&mut trace, sink, Role::Defender, MessageType::FinalAnswer, 1, completion.text, None)?;
        Ok(())
    })();
    match outcome {
        Ok(()) => trace.status = TraceStatus::Complete,
        Err(e) => trace.status = TraceStatus::Incomplete(e.to_string()),
    }
    if let Err(e) = sink.on_finish(&trace) {
        trace.status = TraceStatus::Incomplete(format!("persistence: {e}"));
    }
    trace
}

#[derive(Debug, Error)]
enum TraceOrBackend {
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Executes (or reuses) the trace for one task.
fn obtain_trace(
    task: &Task,
    config: &RunConfig,
    fingerprint: &str,
    backends: &TaskBackends,
    traces_dir: &Path,
) -> Result<Trace, RunError> {
    let path = traces_dir.join(format!("{}.jsonl", task.task_id));
    if path.exists() {
        if let Ok(existing) = read_jsonl(&path) {
            if existing.status.is_complete() && existing.config_fingerprint == fingerprint {
                log::debug!("reusing completed trace for {}", task.task_id);
                return Ok(existing);
            }
        }
    }
    let identity = RunIdentity::derive(&task.task_id, fingerprint);
    let header = Trace::new(
        identity.run_id.clone(),
        identity.task_id.clone(),
        identity.config_fingerprint.clone(),
    );
    let mut sink = JsonlSink::create(&path, &header)?;
    let trace = match &config.method {
        Method::SinglePrompt => {
            run_baseline(task, identity, backends.solver.as_ref(), None, &mut sink)
        }
        Method::Cot => run_baseline(
            task,
            identity,
            backends.solver.as_ref(),
            Some(&config.cot_instruction),
            &mut sink,
        ),
        Method::ForPrompting { variant, stop_rule } => {
            let options = ProtocolOptions {
                variant: *variant,
                stop_rule: *stop_rule,
                prompts: config.prompts.clone(),
                objection_policy: config.objection_policy,
            };
            run_protocol(task, identity, &options, &backends.set, &mut sink)
        }
    };
    Ok(trace)
}

/// Scores one finished trace: extraction, accuracy verdict, rubric
/// scalars.
pub fn score_item(
    task: &Task,
    trace: &Trace,
    method: &str,
    judge: Option<&dyn ChatBackend>,
    rubrics: &[Rubric],
    judge_label: &str,
) -> ItemResult {
    let complete = trace.status.is_complete();
    // Metrics read the final-answer turn; incomplete runs fall back to
    // the last solution-bearing turn for audit extraction only.
    let solution_text = if complete {
        trace.final_answer().map(|t| t.content.clone()).unwrap_or_default()
    } else {
        trace.last_solution_turn().map(|t| t.content.clone()).unwrap_or_default()
    };
    let mut record = PredictionRecord::extract(&task.task_id, solution_text.clone());

    let gold = task.gold_answer;
    let excluded = gold.is_none() || (!complete && record.predicted.is_none());
    if excluded {
        return ItemResult {
            method: method.to_string(),
            task_id: task.task_id.clone(),
            trace_status: trace.status.clone(),
            excluded: true,
            record,
            gold,
            card: None,
        };
    }
    let gold_value = gold.expect("checked above");

    // Incomplete runs stay in the denominator but score as incorrect:
    // there is no final solution to verify.
    let (accuracy_bit, source) = if complete {
        match record.predicted {
            Some(pred) => {
                let (bit, source) = judge_accuracy(pred, gold_value, &task.prompt, judge);
                record.verdict = Some(if bit == 1 { Verdict::Match } else { Verdict::Mismatch });
                record.verdict_source = source;
                (bit, source)
            }
            None => (0, VerdictSource::None),
        }
    } else {
        (0, VerdictSource::None)
    };

    let mut scores: [Option<f64>; 3] = [None, None, None];
    if complete && !solution_text.trim().is_empty() {
        if let Some(judge) = judge {
            for rubric in rubrics {
                let slot = match rubric.kind {
                    RubricKind::Reasoning => 0,
                    RubricKind::Coherence => 1,
                    RubricKind::Holistic => 2,
                };
                scores[slot] = match judge_rubric(&solution_text, rubric, judge) {
                    RubricOutcome::Scored { value, .. } => Some(value),
                    RubricOutcome::Missing => None,
                };
            }
        }
    }

    let card = ScoreCard {
        task_id: task.task_id.clone(),
        accuracy_bit,
        reasoning: scores[0],
        coherence: scores[1],
        holistic: scores[2],
        judge_model: judge_label.to_string(),
        fallback_used: source == VerdictSource::ToleranceFallback,
    };

    ItemResult {
        method: method.to_string(),
        task_id: task.task_id.clone(),
        trace_status: trace.status.clone(),
        excluded: false,
        record,
        gold,
        card: Some(card),
    }
}

/// Runs a method over the corpus with a bounded worker pool, persisting
/// one trace per task and aggregating score cards into a report.
/// Completed task traces with a matching fingerprint are reused, so a
/// rerun resumes instead of recomputing.
pub fn run_method(corpus: &[Task], config: &RunConfig) -> Result<(MethodReport, Vec<ItemResult>), RunError> {
    let provider = BackendProvider::new(config)?;
    run_method_with(corpus, config, &provider)
}

/// [`run_method`] with caller-supplied backends (tests instrument the
/// provider to count calls).
pub fn run_method_with(
    corpus: &[Task],
    config: &RunConfig,
    provider: &BackendProvider,
) -> Result<(MethodReport, Vec<ItemResult>), RunError> {
    let fingerprint = config.fingerprint();
    let traces_dir = config.output_dir.join("traces");
    fs::create_dir_all(&traces_dir)?;

    let judge_label = config.judge_label();
    let method_label = config.method.label();
    let n = corpus.len();
    let next_index = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<ItemResult>>> = Mutex::new(vec![None; n]);
    let first_error: Mutex<Option<RunError>> = Mutex::new(None);

    let workers = config.parallelism.max(1).min(n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next_index.fetch_add(1, Ordering::SeqCst);
                if index >= n {
                    break;
                }
                let task = &corpus[index];
                let backends = provider.task_backends();
                match obtain_trace(task, config, &fingerprint, &backends, &traces_dir) {
                    Ok(trace) => {
                        let item = score_item(
                            task,
                            &trace,
                            method_label,
                            backends.judge.as_deref(),
                            &config.rubrics,
                            &judge_label,
                        );
                        results.lock().expect("results lock")[index] = Some(item);
                    }
                    Err(e) => {
                        let mut guard = first_error.lock().expect("error lock");
                        if guard.is_none() {
                            *guard = Some(e);
                        }
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let items: Vec<ItemResult> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|slot| slot.expect("every task scored"))
        .collect();

    let cards: Vec<ScoreCard> = items.iter().filter_map(|i| i.card.clone()).collect();
    let mut report = aggregate(method_label, &cards)?;
    report.excluded_items = items.iter().filter(|i| i.excluded).count();
    Ok((report, items))
}

const ITEMS_HEADER: &[&str] = &[
    "method",
    "task_id",
    "status",
    "excluded",
    "predicted",
    "gold",
    "extraction_path",
    "verdict",
    "verdict_source",
    "accuracy_bit",
    "reasoning",
    "coherence",
    "holistic",
    "fallback_used",
    "judge_model",
];

fn opt_string<T: ToString>(value: &Option<T>) -> String {
    value.as_ref().map(|v| v.to_string()).unwrap_or_default()
}

/// Writes `report.csv`, `items.csv`, and `summary.txt` under `out_dir`.
/// Column order is stable and item rows are sorted by (method, task_id).
pub fn emit_report(reports: &[MethodReport], items: &[ItemResult], out_dir: &Path) -> Result<(), RunError> {
    if reports.is_empty() {
        return Err(RunError::EmptyInput);
    }
    fs::create_dir_all(out_dir)?;

    let mut writer = csv::Writer::from_path(out_dir.join("report.csv"))?;
    writer.write_record(["method", "metric", "value", "n", "missing"])?;
    for report in reports {
        writer.write_record([
            report.method.as_str(),
            "accuracy",
            &report.mean_accuracy.to_string(),
            &report.n_items.to_string(),
            &report.excluded_items.to_string(),
        ])?;
        for kind in RubricKind::ALL {
            let missing = report.missing_for(kind);
            writer.write_record([
                report.method.as_str(),
                kind.name(),
                &opt_string(&report.mean_for(kind)),
                &(report.n_items - missing).to_string(),
                &missing.to_string(),
            ])?;
        }
    }
    writer.flush()?;

    let mut sorted: Vec<&ItemResult> = items.iter().collect();
    sorted.sort_by(|a, b| (&a.method, &a.task_id).cmp(&(&b.method, &b.task_id)));
    let mut writer = csv::Writer::from_path(out_dir.join("items.csv"))?;
    writer.write_record(ITEMS_HEADER)?;
    for item in sorted {
        let status = match &item.trace_status {
            TraceStatus::Complete => "complete".to_string(),
            TraceStatus::Incomplete(reason) => format!("incomplete: {reason}"),
        };
        let verdict = match item.record.verdict {
            Some(Verdict::Match) => "match",
            Some(Verdict::Mismatch) => "mismatch",
            None => "",
        };
        let card = item.card.as_ref();
        writer.write_record([
            item.method.clone(),
            item.task_id.clone(),
            status,
            item.excluded.to_string(),
            opt_string(&item.record.predicted),
            opt_string(&item.gold),
            item.record.extraction_path.to_string(),
            verdict.to_string(),
            item.record.verdict_source.to_string(),
            card.map(|c| c.accuracy_bit.to_string()).unwrap_or_default(),
            card.and_then(|c| c.reasoning).map(|v| v.to_string()).unwrap_or_default(),
            card.and_then(|c| c.coherence).map(|v| v.to_string()).unwrap_or_default(),
            card.and_then(|c| c.holistic).map(|v| v.to_string()).unwrap_or_default(),
            card.map(|c| c.fallback_used.to_string()).unwrap_or_default(),
            card.map(|c| c.judge_model.clone()).unwrap_or_default(),
        ])?;
    }
    writer.flush()?;

    fs::write(out_dir.join("summary.txt"), render_summary(reports))?;
    Ok(())
}

/// Plain-text table with Table-style percentages (one decimal place).
pub fn render_summary(reports: &[MethodReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<8} {:>6} {:>10} {:>10} {:>10} {:>10} {:>9}\n",
        "method", "items", "accuracy%", "reasoning", "coherence", "holistic", "excluded"
    ));
    for r in reports {
        let scalar = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<8} {:>6} {:>10} {:>10} {:>10} {:>10} {:>9}\n",
            r.method,
            r.n_items,
            percent_1dp(r.correct_count, r.n_items),
            scalar(r.mean_reasoning),
            scalar(r.mean_coherence),
            scalar(r.mean_holistic),
            r.excluded_items,
        ));
    }
    out
}

/// A row parsed back out of `items.csv`.
#[derive(Debug, Clone, Deserialize)]
struct ItemRow {
    method: String,
    task_id: String,
    excluded: String,
    accuracy_bit: String,
    reasoning: String,
    coherence: String,
    holistic: String,
    fallback_used: String,
    judge_model: String,
}

/// Reads item detail CSVs back into per-method score cards, e.g. to merge
/// reports from several runs.
pub fn read_items_csv(path: &Path) -> Result<Vec<(String, ScoreCard)>, RunError> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut cards = Vec::new();
    for row in reader.deserialize::<ItemRow>() {
        let row = row?;
        if row.excluded == "true" {
            continue;
        }
        let parse_opt = |s: &str| -> Option<f64> {
            if s.is_empty() {
                None
            } else {
                s.parse().ok()
            }
        };
        cards.push((
            row.method.clone(),
            ScoreCard {
                task_id: row.task_id,
                accuracy_bit: row.accuracy_bit.parse().unwrap_or(0),
                reasoning: parse_opt(&row.reasoning),
                coherence: parse_opt(&row.coherence),
                holistic: parse_opt(&row.holistic),
                judge_model: row.judge_model,
                fallback_used: row.fallback_used == "true",
            },
        ));
    }
    Ok(cards)
}

/// One replayed verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRow {
    pub task_id: String,
    pub accuracy_bit: Option<u8>,
    pub predicted: Option<Decimal>,
    pub gold: Option<Decimal>,
    pub extraction_path: crate::extraction::ExtractionPath,
    pub source: VerdictSource,
}

/// Recomputes verdicts from persisted traces against a gold corpus.
pub fn replay_traces(
    trace_paths: &[PathBuf],
    gold_by_task: &HashMap<String, Decimal>,
    judge: Option<&dyn ChatBackend>,
) -> Result<Vec<ReplayRow>, RunError> {
    let mut rows = Vec::new();
    for path in trace_paths {
        let trace = read_jsonl(path)?;
        let text = if trace.status.is_complete() {
            trace.final_answer().map(|t| t.content.clone()).unwrap_or_default()
        } else {
            trace.last_solution_turn().map(|t| t.content.clone()).unwrap_or_default()
        };
        let record = PredictionRecord::extract(&trace.task_id, text);
        let gold = gold_by_task.get(&trace.task_id).copied();
        let (bit, source) = match (trace.status.is_complete(), record.predicted, gold) {
            (true, Some(pred), Some(gold)) => {
                let task_prompt = trace
                    .turns
                    .iter()
                    .find(|t| t.message_type == MessageType::TaskStatement)
                    .map(|t| t.content.as_str())
                    .unwrap_or_default();
                let (bit, source) = judge_accuracy(pred, gold, task_prompt, judge);
                (Some(bit), source)
            }
            (false, _, Some(_)) => (Some(0), VerdictSource::None),
            _ => (None, VerdictSource::None),
        };
        rows.push(ReplayRow {
            task_id: trace.task_id.clone(),
            accuracy_bit: bit,
            predicted: record.predicted,
            gold,
            extraction_path: record.extraction_path,
            source,
        });
    }
    rows.sort_by(|a, b| a.task_id.cmp(&b.task_id));
    Ok(rows)
}
