//! Canonical run record: typed turns, grammar enforcement, JSONL
//! persistence, and replay.
//!
//! On-disk schema (`for-trace/1`): one header record
//! `{schema, run_id, task_id, config_fingerprint, status}` followed by one
//! record per turn `{i, role, type, round, content, ts}`, newline
//! delimited, no pretty-printing. A `usage` field appears on a turn only
//! when the backend reported token counts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::TokenUsage;

pub const TRACE_SCHEMA: &str = "for-trace/1";

/// Author of a dialogue turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Defender,
    Debater,
    Host,
    System,
    User,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Defender => "defender",
            Self::Debater => "debater",
            Self::Host => "host",
            Self::System => "system",
            Self::User => "user",
        };
        write!(f, "{s}")
    }
}

/// Structural kind of a dialogue turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    TaskStatement,
    Answer,
    Objection,
    Revision,
    HostDraft,
    FinalAnswer,
}

/// Completion state of a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceStatus {
    Complete,
    Incomplete(String),
}

impl TraceStatus {
    pub fn is_complete(&self) -> bool {
        matches!(self, Self::Complete)
    }
}

/// One ordered, role-tagged, typed turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueTurn {
    /// Position in the trace, starting at 0.
    pub i: u64,
    pub role: Role,
    #[serde(rename = "type")]
    pub message_type: MessageType,
    /// 0 for pre-loop turns, r for round r, N+1 for the final synthesis.
    pub round: u32,
    pub content: String,
    /// Wall-clock timestamp (RFC 3339). Excluded from determinism
    /// comparisons.
    pub ts: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

impl DialogueTurn {
    pub fn new(i: u64, role: Role, message_type: MessageType, round: u32, content: impl Into<String>) -> Self {
        Self {
            i,
            role,
            message_type,
            round,
            content: content.into(),
            ts: Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true),
            usage: None,
        }
    }

    pub fn with_usage(mut self, usage: Option<TokenUsage>) -> Self {
        self.usage = usage;
        self
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("grammar violation: {0}")]
    Grammar(String),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("persistence error: {0}")]
    Persistence(#[from] std::io::Error),
}

/// (role, message_type) pairs that may appear in a trace.
///
/// `FinalAnswer` is normally authored by the Host; a Defender-authored
/// `FinalAnswer` is also allowed so that one-shot baseline runs can
/// mirror the single reply into the final slot and satisfy the complete
/// trace grammar.
pub fn allowed_pair(role: Role, message_type: MessageType) -> bool {
    use MessageType::*;
    use Role::*;
    matches!(
        (role, message_type),
        (User, TaskStatement)
            | (Defender, Answer)
            | (Defender, Revision)
            | (Defender, FinalAnswer)
            | (Debater, Objection)
            | (Host, HostDraft)
            | (Host, FinalAnswer)
    )
}

/// Legal successor relation of the turn grammar
/// `TaskStatement · Answer · (Objection · Revision · HostDraft?)* · FinalAnswer`.
pub fn allowed_successor(prev: Option<MessageType>, next: MessageType) -> bool {
    use MessageType::*;
    match prev {
        None => matches!(next, TaskStatement),
        Some(TaskStatement) => matches!(next, Answer),
        Some(Answer) => matches!(next, Objection | FinalAnswer),
        Some(Objection) => matches!(next, Revision),
        Some(Revision) => matches!(next, Objection | HostDraft | FinalAnswer),
        Some(HostDraft) => matches!(next, Objection | FinalAnswer),
        Some(FinalAnswer) => false,
    }
}

/// Canonical run record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub run_id: String,
    pub task_id: String,
    pub config_fingerprint: String,
    pub turns: Vec<DialogueTurn>,
    pub status: TraceStatus,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeaderRecord {
    schema: String,
    run_id: String,
    task_id: String,
    config_fingerprint: String,
    status: TraceStatus,
}

impl Trace {
    pub fn new(run_id: impl Into<String>, task_id: impl Into<String>, config_fingerprint: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            task_id: task_id.into(),
            config_fingerprint: config_fingerprint.into(),
            turns: Vec::new(),
            status: TraceStatus::Incomplete("in-progress".into()),
        }
    }

    /// Appends a turn after checking index contiguity, the role/type
    /// matrix, and the turn-order grammar.
    pub fn append_turn(&mut self, turn: DialogueTurn) -> Result<(), TraceError> {
        if turn.i != self.turns.len() as u64 {
            return Err(TraceError::Grammar(format!(
                "turn index {} does not continue the trace (expected {})",
                turn.i,
                self.turns.len()
            )));
        }
        if !allowed_pair(turn.role, turn.message_type) {
            return Err(TraceError::Grammar(format!(
                "role {:?} may not author {:?}",
                turn.role, turn.message_type
            )));
        }
        let prev = self.turns.last().map(|t| t.message_type);
        if !allowed_successor(prev, turn.message_type) {
            return Err(TraceError::Grammar(format!(
                "{:?} may not follow {:?}",
                turn.message_type, prev
            )));
        }
        self.turns.push(turn);
        Ok(())
    }

    /// Builds and appends the next turn, stamping index from the current
    /// length.
    pub fn push_next(
        &mut self,
        role: Role,
        message_type: MessageType,
        round: u32,
        content: impl Into<String>,
        usage: Option<TokenUsage>,
    ) -> Result<&DialogueTurn, TraceError> {
        let turn = DialogueTurn::new(self.turns.len() as u64, role, message_type, round, content)
            .with_usage(usage);
        self.append_turn(turn)?;
        Ok(self.turns.last().expect("turn just pushed"))
    }

    /// The final synthesis turn, if the run has one.
    pub fn final_answer(&self) -> Option<&DialogueTurn> {
        self.turns
            .iter()
            .rev()
            .find(|t| t.message_type == MessageType::FinalAnswer)
    }

    /// Latest turn carrying solution content, for best-effort scoring of
    /// incomplete runs.
    pub fn last_solution_turn(&self) -> Option<&DialogueTurn> {
        self.turns.iter().rev().find(|t| {
            matches!(
                t.message_type,
                MessageType::Answer | MessageType::Revision | MessageType::HostDraft | MessageType::FinalAnswer
            )
        })
    }

    /// Number of completed objection-revision rounds.
    pub fn round_count(&self) -> usize {
        self.turns
            .iter()
            .filter(|t| t.message_type == MessageType::Revision)
            .count()
    }

    /// Validates the complete-trace grammar: exactly one task statement
    /// and one final answer, with every step in the successor relation.
    pub fn validate_complete(&self) -> Result<(), TraceError> {
        let mut prev = None;
        for turn in &self.turns {
            if !allowed_pair(turn.role, turn.message_type) {
                return Err(TraceError::Grammar(format!(
                    "role {:?} may not author {:?}",
                    turn.role, turn.message_type
                )));
            }
            if !allowed_successor(prev, turn.message_type) {
                return Err(TraceError::Grammar(format!(
                    "{:?} may not follow {prev:?}",
                    turn.message_type
                )));
            }
            prev = Some(turn.message_type);
        }
        let tasks = self.turns.iter().filter(|t| t.message_type == MessageType::TaskStatement).count();
        let finals = self.turns.iter().filter(|t| t.message_type == MessageType::FinalAnswer).count();
        if tasks != 1 || finals != 1 || prev != Some(MessageType::FinalAnswer) {
            return Err(TraceError::Grammar(format!(
                "complete trace needs exactly one task statement and one terminal final answer (found {tasks} and {finals})"
            )));
        }
        Ok(())
    }

    /// Equality that ignores wall-clock timestamps, for determinism and
    /// replay checks.
    pub fn eq_ignoring_timestamps(&self, other: &Self) -> bool {
        if self.run_id != other.run_id
            || self.task_id != other.task_id
            || self.config_fingerprint != other.config_fingerprint
            || self.status != other.status
            || self.turns.len() != other.turns.len()
        {
            return false;
        }
        self.turns.iter().zip(&other.turns).all(|(a, b)| {
            a.i == b.i
                && a.role == b.role
                && a.message_type == b.message_type
                && a.round == b.round
                && a.content == b.content
                && a.usage == b.usage
        })
    }

    fn header(&self) -> HeaderRecord {
        HeaderRecord {
            schema: TRACE_SCHEMA.into(),
            run_id: self.run_id.clone(),
            task_id: self.task_id.clone(),
            config_fingerprint: self.config_fingerprint.clone(),
            status: self.status.clone(),
        }
    }

    /// Serializes the whole trace to JSONL text.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.header()).expect("header serializes"));
        out.push('\n');
        for turn in &self.turns {
            out.push_str(&serde_json::to_string(turn).expect("turn serializes"));
            out.push('\n');
        }
        out
    }
}

/// Writes the trace as one header record plus one record per turn.
pub fn write_jsonl(trace: &Trace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, trace.to_jsonl())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a trace back, tolerating a live-appended file by stopping at the
/// last complete line. Complete traces are grammar-checked on load.
pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    let text = fs::read_to_string(path.as_ref())?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<Trace, TraceError> {
    let mut lines: Vec<&str> = text.split('\n').collect();
    // Drop the last split element: with a trailing newline it is empty,
    // without one it is a fragment from a write still in flight.
    lines.pop();
    let mut iter = lines.into_iter().enumerate();
    let (_, header_line) = iter.next().ok_or(TraceError::Parse {
        line: 1,
        message: "empty trace file".into(),
    })?;
    let header: HeaderRecord = serde_json::from_str(header_line).map_err(|e| TraceError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.schema != TRACE_SCHEMA {
        return Err(TraceError::Parse {
            line: 1,
            message: format!("unsupported schema `{}`", header.schema),
        });
    }
    let mut trace = Trace {
        run_id: header.run_id,
        task_id: header.task_id,
        config_fingerprint: header.config_fingerprint,
        turns: Vec::new(),
        status: header.status,
    };
    for (idx, line) in iter {
        if line.is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let turn: DialogueTurn = serde_json::from_str(line).map_err(|e| TraceError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        trace.append_turn(turn)?;
    }
    if trace.status.is_complete() {
        trace.validate_complete()?;
    }
    Ok(trace)
}

/// Receives turns as a run progresses. Implementations persist with
/// write-ahead discipline: a turn is durable before the next backend call
/// is issued.
pub trait TraceSink {
    fn on_turn(&mut self, trace: &Trace, turn: &DialogueTurn) -> Result<(), TraceError>;
    fn on_finish(&mut self, trace: &Trace) -> Result<(), TraceError>;
}

/// Sink for in-memory runs (tests, dry runs).
#[derive(Debug, Default)]
pub struct NullSink;

impl TraceSink for NullSink {
    fn on_turn(&mut self, _trace: &Trace, _turn: &DialogueTurn) -> Result<(), TraceError> {
        Ok(())
    }

    fn on_finish(&mut self, _trace: &Trace) -> Result<(), TraceError> {
        Ok(())
    }
}

/// Write-ahead JSONL sink. The live file carries an in-progress header
/// and grows one turn per append, each flushed and synced, so a crash at
/// any point leaves a valid incomplete trace on disk. Finalization
/// rewrites the file atomically with the terminal status.
pub struct JsonlSink {
    path: PathBuf,
    writer: Option<BufWriter<File>>,
}

impl JsonlSink {
    pub fn create(path: impl Into<PathBuf>, trace: &Trace) -> Result<Self, TraceError> {
        let path = path.into();
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let file = File::create(&path)?;
        let mut writer = BufWriter::new(file);
        let header = serde_json::to_string(&trace.header()).expect("header serializes");
        writeln!(writer, "{header}")?;
        writer.flush()?;
        writer.get_ref().sync_data()?;
        Ok(Self { path, writer: Some(writer) })
    }
}

impl TraceSink for JsonlSink {
    fn on_turn(&mut self, _trace: &Trace, turn: &DialogueTurn) -> Result<(), TraceError> {
        let writer = self.writer.as_mut().expect("sink already finalized");
        let line = serde_json::to_string(turn).expect("turn serializes");
        writeln!(writer, "{line}")?;
        writer.flush()?;
        writer.get_ref().sync_data()?;
        Ok(())
    }

    fn on_finish(&mut self, trace: &Trace) -> Result<(), TraceError> {
        if let Some(writer) = self.writer.take() {
            drop(writer);
        }
        write_jsonl(trace, &self.path)
    }
}
