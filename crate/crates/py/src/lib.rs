//! Python bindings for the core protocol and evaluation operations.

use std::str::FromStr;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use forp::backend::ScriptedResponses;
use forp::dataset::{self, SamplePlan, Task};
use forp::extraction::{self, Verdict};
use forp::protocol::{
    run_protocol, BackendSet, ObjectionPolicy, ProtocolOptions, ProtocolVariant, RolePromptSet,
    RoundBudget, RunIdentity, StopRule,
};
use forp::runner::percent_1dp;
use forp::trace::NullSink;
use rust_decimal::Decimal;

fn parse_decimal(name: &str, value: &str) -> PyResult<Decimal> {
    Decimal::from_str(&value.replace(',', "").replace('\u{2212}', "-"))
        .map_err(|e| PyValueError::new_err(format!("{name} is not a decimal number: {e}")))
}

/// Extract the final numeric prediction from solution text.
/// Returns `(value_or_None, path)` with path in {"marker", "last_number", "none"}.
#[pyfunction]
fn extract_prediction(text: &str) -> (Option<String>, String) {
    let (value, path) = extraction::extract_prediction(text);
    (value.map(|v| v.to_string()), path.to_string())
}

/// Strict `|pred - gold| < 0.01` comparison in exact decimal arithmetic.
#[pyfunction]
fn compare_tolerance(pred: &str, gold: &str) -> PyResult<bool> {
    let pred = parse_decimal("pred", pred)?;
    let gold = parse_decimal("gold", gold)?;
    Ok(extraction::compare_tolerance(pred, gold) == Verdict::Match)
}

/// Parse the gold number after the final `#### ` marker.
#[pyfunction]
fn parse_gold(answer_text: &str) -> PyResult<String> {
    dataset::parse_gold(answer_text)
        .map(|d| d.to_string())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Check that every non-empty line of a Debater reply asks a question.
/// Returns `(ok, reason_or_None)`.
#[pyfunction]
fn validate_objection(text: &str) -> (bool, Option<String>) {
    match forp::protocol::validate_objection(text) {
        Ok(()) => (true, None),
        Err(fault) => (false, Some(fault.to_string())),
    }
}

/// Deterministic seeded subsample: the corpus indices selected by the
/// pinned ChaCha8 Fisher-Yates procedure, in corpus order.
#[pyfunction]
fn sample_indices(corpus_len: usize, size: usize, seed: u64) -> PyResult<Vec<usize>> {
    dataset::sample_indices(corpus_len, &SamplePlan { size, seed })
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Accuracy percentage at one decimal place.
#[pyfunction]
fn percent(correct: usize, total: usize) -> String {
    percent_1dp(correct, total)
}

/// Run the protocol for one task against a scripted mock transcript.
/// Returns the trace as JSONL text (`for-trace/1` schema).
#[pyfunction]
#[pyo3(signature = (task, script_path, rounds=3, variant="final-host", task_id="t00000"))]
fn run_scripted(
    task: &str,
    script_path: &str,
    rounds: u32,
    variant: &str,
    task_id: &str,
) -> PyResult<String> {
    let script = ScriptedResponses::load_script(script_path)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    let variant: ProtocolVariant = variant.parse().map_err(PyValueError::new_err)?;
    let options = ProtocolOptions {
        variant,
        stop_rule: StopRule::FixedRounds(RoundBudget(rounds)),
        prompts: RolePromptSet::default(),
        objection_policy: ObjectionPolicy::Lenient,
    };
    let backends = BackendSet::scripted(Arc::new(script));
    let task = Task::from_fields(task_id, task, None);
    let trace = run_protocol(
        &task,
        RunIdentity::derive(task_id, "python-scripted"),
        &options,
        &backends,
        &mut NullSink,
    );
    Ok(trace.to_jsonl())
}

#[pymodule]
fn forp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(extract_prediction, m)?)?;
    m.add_function(wrap_pyfunction!(compare_tolerance, m)?)?;
    m.add_function(wrap_pyfunction!(parse_gold, m)?)?;
    m.add_function(wrap_pyfunction!(validate_objection, m)?)?;
    m.add_function(wrap_pyfunction!(sample_indices, m)?)?;
    m.add_function(wrap_pyfunction!(percent, m)?)?;
    m.add_function(wrap_pyfunction!(run_scripted, m)?)?;
    Ok(())
}
