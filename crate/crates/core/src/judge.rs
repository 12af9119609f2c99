//! Judge-model verification of extracted answers and rubric-based scalar
//! scoring, with a deterministic tolerance fallback.
//!
//! The judge verifies an extracted prediction against the gold answer
//! (binary 0/1) and scores solution quality on three fixed rubrics with
//! scalars in [0, 1]. Identical rubric texts are applied across methods.
//! The judge never sees the gold answer during rubric scoring, so quality
//! scores stay independent of correctness.

use rust_decimal::prelude::ToPrimitive;
use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};

use crate::backend::{ChatBackend, ChatMessage};
use crate::extraction::{self, compare_tolerance, Verdict, VerdictSource};

/// The three quality dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RubricKind {
    Reasoning,
    Coherence,
    Holistic,
}

impl RubricKind {
    pub const ALL: [RubricKind; 3] = [Self::Reasoning, Self::Coherence, Self::Holistic];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Reasoning => "reasoning",
            Self::Coherence => "coherence",
            Self::Holistic => "holistic",
        }
    }
}

/// A named rubric with its versioned instruction text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rubric {
    pub kind: RubricKind,
    pub instruction_text: String,
}

impl Rubric {
    pub fn default_for(kind: RubricKind) -> Self {
        let instruction_text = match kind {
            RubricKind::Reasoning => {
                "Score how logically sound the solution's reasoning is, step by step: are \
                 intermediate derivations correct, are assumptions and edge cases handled, and \
                 does the solution check itself for errors?"
            }
            RubricKind::Coherence => {
                "Score how coherent the solution is as a piece of writing: organization, clarity \
                 of transitions between steps, consistent use of references and notation, and \
                 absence of contradictions."
            }
            RubricKind::Holistic => {
                "Score the overall quality of the solution: usefulness, completeness, and \
                 apparent correctness, judged independently of any other dimension."
            }
        };
        Self { kind, instruction_text: instruction_text.into() }
    }

    pub fn default_set() -> Vec<Rubric> {
        RubricKind::ALL.iter().map(|k| Self::default_for(*k)).collect()
    }
}

/// Result of scoring one rubric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RubricOutcome {
    Scored { value: f64, clamped: bool },
    /// Unparseable after the strict re-ask; excluded from means and
    /// counted in the coverage statistic.
    Missing,
}

/// Per-item judge scalars plus the accuracy bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCard {
    pub task_id: String,
    pub accuracy_bit: u8,
    pub reasoning: Option<f64>,
    pub coherence: Option<f64>,
    pub holistic: Option<f64>,
    pub judge_model: String,
    pub fallback_used: bool,
}

impl ScoreCard {
    pub fn rubric_value(&self, kind: RubricKind) -> Option<f64> {
        match kind {
            RubricKind::Reasoning => self.reasoning,
            RubricKind::Coherence => self.coherence,
            RubricKind::Holistic => self.holistic,
        }
    }
}

const STRICT_BINARY_REASK: &str = "Reply with a single character, 0 or 1, and nothing else.";
const STRICT_SCALAR_REASK: &str = "Reply with a single number between 0 and 1 only.";

fn accuracy_messages(task_prompt: &str, pred: Decimal, gold: Decimal) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(
            "You are a strict grader. Decide whether an extracted numeric prediction matches \
             the reference answer for the given task. Reply with 1 if it matches, 0 if it does \
             not. Output the single digit only.",
        ),
        ChatMessage::user(format!(
            "Task:\n{task_prompt}\n\nExtracted prediction: {pred}\nReference answer: {gold}\n\n\
             Does the prediction match the reference? Reply 1 or 0."
        )),
    ]
}

fn rubric_messages(solution: &str, rubric: &Rubric) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(
            "You are an evaluation judge. Score the solution below on the given criterion and \
             reply with a single decimal number between 0 and 1. Output the number only.",
        ),
        ChatMessage::user(format!(
            "Criterion: {}\n\nSolution:\n{solution}\n\nScore (0 to 1):",
            rubric.instruction_text
        )),
    ]
}

fn parse_binary(reply: &str) -> Option<u8> {
    reply
        .split(|c: char| c.is_whitespace() || c.is_ascii_punctuation() && c != '-')
        .find_map(|word| match word {
            "0" => Some(0),
            "1" => Some(1),
            _ => None,
        })
}

/// Asks the judge whether `pred` matches `gold` (single pass, one strict
/// re-ask on an unparseable reply). Judge absence or failure never
/// surfaces: the tolerance comparison answers instead.
pub fn judge_accuracy(
    pred: Decimal,
    gold: Decimal,
    task_prompt: &str,
    backend: Option<&dyn ChatBackend>,
) -> (u8, VerdictSource) {
    let fallback = || {
        let bit = match compare_tolerance(pred, gold) {
            Verdict::Match => 1,
            Verdict::Mismatch => 0,
        };
        (bit, VerdictSource::ToleranceFallback)
    };
    let Some(backend) = backend else {
        return fallback();
    };
    let mut messages = accuracy_messages(task_prompt, pred, gold);
    for attempt in 0..2 {
        match backend.complete(&messages) {
            Ok(completion) => match parse_binary(&completion.text) {
                Some(bit) => return (bit, VerdictSource::Judge),
                None if attempt == 0 => {
                    messages.push(ChatMessage::assistant(&completion.text));
                    messages.push(ChatMessage::user(STRICT_BINARY_REASK));
                }
                None => break,
            },
            Err(e) => {
                log::warn!("accuracy judge unavailable, falling back to tolerance: {e}");
                return fallback();
            }
        }
    }
    log::warn!("accuracy judge reply unparseable after re-ask, falling back to tolerance");
    fallback()
}

/// Scores one rubric. Out-of-range values are clamped (and flagged);
/// replies with no number after one strict re-ask score as missing.
pub fn judge_rubric(solution: &str, rubric: &Rubric, backend: &dyn ChatBackend) -> RubricOutcome {
    let mut messages = rubric_messages(solution, rubric);
    for attempt in 0..2 {
        match backend.complete(&messages) {
            Ok(completion) => match extraction::first_numeric_token(&completion.text) {
                Some(value) => {
                    let raw = value.to_f64().unwrap_or(f64::NAN);
                    if !raw.is_finite() {
                        return RubricOutcome::Missing;
                    }
                    let clamped = !(0.0..=1.0).contains(&raw);
                    if clamped {
                        log::warn!(
                            "rubric {} score {raw} out of range; clamped",
                            rubric.kind.name()
                        );
                    }
                    return RubricOutcome::Scored { value: raw.clamp(0.0, 1.0), clamped };
                }
                None if attempt == 0 => {
                    messages.push(ChatMessage::assistant(&completion.text));
                    messages.push(ChatMessage::user(STRICT_SCALAR_REASK));
                }
                None => break,
            },
            Err(e) => {
                log::warn!("rubric judge call failed, scoring missing: {e}");
                return RubricOutcome::Missing;
            }
        }
    }
    RubricOutcome::Missing
}
