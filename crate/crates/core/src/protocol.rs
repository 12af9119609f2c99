//! The objection-revision state machine.
//!
//! One run: the Defender answers the task, then for each round the
//! Debater raises question-form objections and the Defender revises its
//! answer to the original task; the Host synthesizes the dialogue into
//! the final answer. The Debater never supplies fixes and the Defender
//! never sees Host drafts, so the Defender stays the sole author of
//! solution content.

use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, ChatBackend, ChatMessage, Completion, ScriptCursors, ScriptedBackend,
    ScriptedResponses,
};
use crate::dataset::Task;
use crate::trace::{DialogueTurn, Trace, TraceError, TraceSink, TraceStatus};

pub use crate::trace::{MessageType, Role};

/// Number of objection-revision cycles before synthesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundBudget(pub u32);

/// Loop bound. `FixedRounds` is the evaluated setting; the wall-clock and
/// token budgets finalize via the Host on whatever history exists when
/// they trip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "StopRuleRepr", into = "StopRuleRepr")]
pub enum StopRule {
    FixedRounds(RoundBudget),
    MaxWallClock(Duration),
    MaxTotalTokens(u64),
}

#[derive(Serialize, Deserialize, Clone, Copy)]
#[serde(rename_all = "snake_case")]
enum StopRuleRepr {
    FixedRounds(u32),
    MaxWallClockMs(u64),
    MaxTotalTokens(u64),
}

impl From<StopRuleRepr> for StopRule {
    fn from(r: StopRuleRepr) -> Self {
        match r {
            StopRuleRepr::FixedRounds(n) => Self::FixedRounds(RoundBudget(n)),
            StopRuleRepr::MaxWallClockMs(ms) => Self::MaxWallClock(Duration::from_millis(ms)),
            StopRuleRepr::MaxTotalTokens(t) => Self::MaxTotalTokens(t),
        }
    }
}

impl From<StopRule> for StopRuleRepr {
    fn from(r: StopRule) -> Self {
        match r {
            StopRule::FixedRounds(RoundBudget(n)) => Self::FixedRounds(n),
            StopRule::MaxWallClock(d) => Self::MaxWallClockMs(d.as_millis() as u64),
            StopRule::MaxTotalTokens(t) => Self::MaxTotalTokens(t),
        }
    }
}

/// Host invocation schedule.
///
/// `FinalHostOnly` calls the Host exactly once at the end; the per-round
/// variant also records a Host draft each round. Drafts are forwarded to
/// the next round's Debater alongside the latest revision, but never to
/// the Defender.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolVariant {
    FinalHostOnly,
    PerRoundHostDraft,
}

impl std::str::FromStr for ProtocolVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "final-host" | "final_host_only" => Ok(Self::FinalHostOnly),
            "per-round-host" | "per_round_host_draft" => Ok(Self::PerRoundHostDraft),
            other => Err(format!("unknown variant `{other}` (expected final-host or per-round-host)")),
        }
    }
}

/// System prompts for the three roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolePromptSet {
    pub defender_system: String,
    pub debater_system: String,
    pub host_system: String,
}

impl Default for RolePromptSet {
    fn default() -> Self {
        Self {
            defender_system: "You are the Defender. Answer the user's task as well as you can. \
                              Be concise but correct. State a single final answer at the end, \
                              clearly marked."
                .into(),
            debater_system: "You are the Debater. Ask clarifying and challenging questions about \
                             the current answer: probe logical gaps, hidden assumptions, \
                             counterexamples, and robustness. Never propose fixes or alternative \
                             solutions. Your output must be ONLY a concise list of questions."
                .into(),
            host_system: "You are the Host. Synthesize the Defender's answers and the Debater's \
                          objections into one refined final answer. Quote specific objections \
                          when relevant, ensure every concern is resolved, and state the final \
                          answer clearly."
                .into(),
        }
    }
}

impl RolePromptSet {
    pub fn validate(&self) -> Result<(), String> {
        for (name, text) in [
            ("defender", &self.defender_system),
            ("debater", &self.debater_system),
            ("host", &self.host_system),
        ] {
            if text.trim().is_empty() {
                return Err(format!("{name} system prompt is empty"));
            }
        }
        if !self.debater_system.to_ascii_lowercase().contains("question") {
            return Err("debater system prompt must instruct questions-only output".into());
        }
        Ok(())
    }
}

/// How objection-purity violations are handled. Lenient logs and keeps
/// going (model transcripts routinely carry brief framing sentences);
/// strict re-asks once and aborts the run if the retry still fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectionPolicy {
    #[default]
    Lenient,
    Strict,
}

/// Everything `run_protocol` needs besides the task and backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    pub variant: ProtocolVariant,
    pub stop_rule: StopRule,
    pub prompts: RolePromptSet,
    pub objection_policy: ObjectionPolicy,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            variant: ProtocolVariant::FinalHostOnly,
            stop_rule: StopRule::FixedRounds(RoundBudget(3)),
            prompts: RolePromptSet::default(),
            objection_policy: ObjectionPolicy::Lenient,
        }
    }
}

/// Per-role backends for one run. Roles may point at the same backend.
#[derive(Clone)]
pub struct BackendSet {
    pub defender: Arc<dyn ChatBackend>,
    pub debater: Arc<dyn ChatBackend>,
    pub host: Arc<dyn ChatBackend>,
}

impl BackendSet {
    pub fn shared(backend: Arc<dyn ChatBackend>) -> Self {
        Self { defender: backend.clone(), debater: backend.clone(), host: backend }
    }

    /// Role backends over one script with fresh per-run cursors.
    pub fn scripted(script: Arc<ScriptedResponses>) -> Self {
        let cursors = ScriptCursors::new();
        Self {
            defender: Arc::new(ScriptedBackend::new(script.clone(), cursors.clone(), "defender")),
            debater: Arc::new(ScriptedBackend::new(script.clone(), cursors.clone(), "debater")),
            host: Arc::new(ScriptedBackend::new(script, cursors, "host")),
        }
    }
}

/// A non-interrogative unit found in a Debater reply.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{reason}: {unit:?}")]
pub struct ObjectionFault {
    pub unit: String,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("objection contract violation: {0}")]
    ObjectionContract(ObjectionFault),
    #[error("precondition violation: {0}")]
    Precondition(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Checks that every non-empty line of a Debater reply asks a question.
///
/// A unit passes when it contains a question mark; a question followed by
/// a brief trailing remark in the same unit still counts as
/// interrogative. Total function: never errors.
pub fn validate_objection(text: &str) -> Result<(), ObjectionFault> {
    if text.trim().is_empty() {
        return Err(ObjectionFault { unit: String::new(), reason: "empty objection".into() });
    }
    for line in text.lines() {
        let unit = line.trim();
        if unit.is_empty() {
            continue;
        }
        if !unit.contains('?') {
            return Err(ObjectionFault {
                unit: unit.to_string(),
                reason: "declarative unit".into(),
            });
        }
    }
    Ok(())
}

const REVISE_INSTRUCTION: &str = "Revise your answer to the original task, addressing the \
                                  questions above. Give the complete updated answer and state a \
                                  single final answer at the end.";

const SYNTHESIZE_INSTRUCTION: &str = "Synthesize the dialogue above into the refined final answer.";

/// Context for the initial answer: system prompt plus the bare task.
pub fn defender_initial_context(task: &Task, prompts: &RolePromptSet) -> Vec<ChatMessage> {
    vec![
        ChatMessage::system(&prompts.defender_system),
        ChatMessage::user(&task.prompt),
    ]
}

/// Context for a revision: the original task once, every prior
/// objection/answer pair, and the newest objections. Host drafts are
/// excluded so the Defender never sees Host paraphrases.
pub fn defender_revision_context(
    task: &Task,
    turns: &[DialogueTurn],
    prompts: &RolePromptSet,
) -> Vec<ChatMessage> {
    let mut messages = vec![
        ChatMessage::system(&prompts.defender_system),
        ChatMessage::user(&task.prompt),
    ];
    for turn in turns {
        match turn.message_type {
            MessageType::Answer | MessageType::Revision => {
                messages.push(ChatMessage::assistant(&turn.content));
            }
            MessageType::Objection => {
                messages.push(ChatMessage::user(&turn.content));
            }
            _ => {}
        }
    }
    if let Some(last) = messages.last_mut() {
        if last.role == crate::backend::ChatRole::User {
            last.content = format!("{}\n\n{REVISE_INSTRUCTION}", last.content);
        }
    }
    messages
}

/// Context for the Debater: the prior answer alone, or the forwarded
/// Host draft followed by the latest revision under the per-round
/// variant. Never includes the gold answer or any fixes.
pub fn debater_context(
    prior_answer: &str,
    forwarded_draft: Option<&str>,
    prompts: &RolePromptSet,
) -> Vec<ChatMessage> {
    let content = match forwarded_draft {
        Some(draft) => format!("{draft}\n\n{prior_answer}"),
        None => prior_answer.to_string(),
    };
    vec![ChatMessage::system(&prompts.debater_system), ChatMessage::user(content)]
}

/// Context for Host synthesis: the full ordered history rendered as a
/// labeled transcript.
pub fn host_context(task: &Task, turns: &[DialogueTurn], prompts: &RolePromptSet) -> Vec<ChatMessage> {
    let mut body = format!("Task:\n{}", task.prompt);
    for turn in turns {
        let label = match turn.message_type {
            MessageType::Answer | MessageType::Revision => "Defender",
            MessageType::Objection => "Debater",
            MessageType::HostDraft => "Host (draft)",
            MessageType::TaskStatement | MessageType::FinalAnswer => continue,
        };
        body.push_str(&format!("\n\n{label}: {}", turn.content));
    }
    body.push_str(&format!("\n\n{SYNTHESIZE_INSTRUCTION}"));
    vec![ChatMessage::system(&prompts.host_system), ChatMessage::user(body)]
}

/// Initial answer `A_0` from the task alone.
pub fn defender_initial(
    task: &Task,
    prompts: &RolePromptSet,
    backend: &dyn ChatBackend,
) -> Result<Completion, BackendError> {
    let completion = backend.complete(&defender_initial_context(task, prompts))?;
    warn_if_degenerate("defender", &completion.text);
    Ok(completion)
}

/// Objections `O_r` against the prior answer.
pub fn debater_object(
    prior_answer: &DialogueTurn,
    forwarded_draft: Option<&str>,
    prompts: &RolePromptSet,
    backend: &dyn ChatBackend,
    policy: ObjectionPolicy,
) -> Result<Completion, ProtocolError> {
    if !matches!(prior_answer.message_type, MessageType::Answer | MessageType::Revision) {
        return Err(ProtocolError::Precondition(format!(
            "debater input must be an answer or revision, got {:?}",
            prior_answer.message_type
        )));
    }
    let context = debater_context(&prior_answer.content, forwarded_draft, prompts);
    let completion = backend.complete(&context)?;
    warn_if_degenerate("debater", &completion.text);
    match validate_objection(&completion.text) {
        Ok(()) => Ok(completion),
        Err(fault) => match policy {
            ObjectionPolicy::Lenient => {
                log::warn!("objection purity violation (lenient): {fault}");
                Ok(completion)
            }
            ObjectionPolicy::Strict => {
                let mut retry_context = context;
                retry_context.push(ChatMessage::assistant(&completion.text));
                retry_context.push(ChatMessage::user(format!(
                    "Your previous output contained a non-question unit ({:?}). \
                     Reply again with ONLY a concise list of questions.",
                    fault.unit
                )));
                let retried = backend.complete(&retry_context)?;
                match validate_objection(&retried.text) {
                    Ok(()) => Ok(retried),
                    Err(fault) => Err(ProtocolError::ObjectionContract(fault)),
                }
            }
        },
    }
}

/// Revision `A_r`, re-anchored on the original task.
pub fn defender_revise(
    task: &Task,
    turns: &[DialogueTurn],
    prompts: &RolePromptSet,
    backend: &dyn ChatBackend,
) -> Result<Completion, ProtocolError> {
    if !turns.iter().any(|t| t.message_type == MessageType::Objection) {
        return Err(ProtocolError::Precondition("revision requires at least one objection".into()));
    }
    let completion = backend.complete(&defender_revision_context(task, turns, prompts))?;
    warn_if_degenerate("defender", &completion.text);
    Ok(completion)
}

/// Host synthesis over the full history (final answer or per-round draft).
pub fn host_synthesize(
    task: &Task,
    turns: &[DialogueTurn],
    prompts: &RolePromptSet,
    backend: &dyn ChatBackend,
) -> Result<Completion, ProtocolError> {
    if !turns.iter().any(|t| t.message_type == MessageType::Answer) {
        return Err(ProtocolError::Precondition("host synthesis requires at least one answer".into()));
    }
    let completion = backend.complete(&host_context(task, turns, prompts))?;
    warn_if_degenerate("host", &completion.text);
    Ok(completion)
}

fn warn_if_degenerate(role: &str, text: &str) {
    if text.trim().is_empty() {
        log::warn!("degenerate empty reply from {role}; preserved verbatim");
    }
}

/// Identity fields stamped into the produced trace.
#[derive(Debug, Clone)]
pub struct RunIdentity {
    pub run_id: String,
    pub task_id: String,
    pub config_fingerprint: String,
}

impl RunIdentity {
    /// Deterministic identity so identical (task, config) pairs replay to
    /// identical traces.
    pub fn derive(task_id: &str, config_fingerprint: &str) -> Self {
        let short = &config_fingerprint[..config_fingerprint.len().min(12)];
        Self {
            run_id: format!("{task_id}-{short}"),
            task_id: task_id.to_string(),
            config_fingerprint: config_fingerprint.to_string(),
        }
    }
}

/// Runs the full protocol for one task.
///
/// Backend failures abort the run and the returned trace is marked
/// incomplete with the reason; a wall-clock or token budget tripping
/// mid-loop is not a failure — the Host finalizes the partial history.
pub fn run_protocol(
    task: &Task,
    identity: RunIdentity,
    options: &ProtocolOptions,
    backends: &BackendSet,
    sink: &mut dyn TraceSink,
) -> Trace {
    let mut trace = Trace::new(identity.run_id, identity.task_id, identity.config_fingerprint);
    match drive(task, options, backends, sink, &mut trace) {
        Ok(()) => trace.status = TraceStatus::Complete,
        Err(e) => trace.status = TraceStatus::Incomplete(e.to_string()),
    }
    if let Err(e) = sink.on_finish(&trace) {
        log::error!("failed to finalize trace {}: {e}", trace.run_id);
        trace.status = TraceStatus::Incomplete(format!("persistence: {e}"));
    }
    trace
}

fn push(
    trace: &mut Trace,
    sink: &mut dyn TraceSink,
    role: Role,
    message_type: MessageType,
    round: u32,
    completion: Completion,
) -> Result<(), ProtocolError> {
    let turn = trace.push_next(role, message_type, round, completion.text, completion.usage)?;
    let turn = turn.clone();
    sink.on_turn(trace, &turn)?;
    Ok(())
}

fn drive(
    task: &Task,
    options: &ProtocolOptions,
    backends: &BackendSet,
    sink: &mut dyn TraceSink,
    trace: &mut Trace,
) -> Result<(), ProtocolError> {
    let started = Instant::now();
    let mut known_tokens: u64 = 0;
    let mut usage_unknown = false;
    fn track(completion: &Completion, unknown: &mut bool, known: &mut u64) {
        match completion.usage {
            Some(u) => *known += u.total(),
            None => *unknown = true,
        }
    }

    push(
        trace,
        sink,
        Role::User,
        MessageType::TaskStatement,
        0,
        Completion { text: task.prompt.clone(), usage: None },
    )?;

    let initial = defender_initial(task, &options.prompts, backends.defender.as_ref())?;
    track(&initial, &mut usage_unknown, &mut known_tokens);
    push(trace, sink, Role::Defender, MessageType::Answer, 0, initial)?;

    let mut completed_rounds: u32 = 0;
    loop {
        let next_round = completed_rounds + 1;
        let within_budget = match options.stop_rule {
            StopRule::FixedRounds(RoundBudget(n)) => next_round <= n,
            StopRule::MaxWallClock(limit) => started.elapsed() < limit,
            // A backend that does not report usage makes a token budget
            // unenforceable; stop and synthesize rather than loop blind.
            StopRule::MaxTotalTokens(budget) => !usage_unknown && known_tokens < budget,
        };
        if !within_budget {
            break;
        }

        let prior = trace
            .turns
            .iter()
            .rev()
            .find(|t| matches!(t.message_type, MessageType::Answer | MessageType::Revision))
            .cloned()
            .expect("an answer exists before any round");
        let forwarded_draft = match options.variant {
            ProtocolVariant::PerRoundHostDraft => trace
                .turns
                .iter()
                .rev()
                .find(|t| t.message_type == MessageType::HostDraft)
                .map(|t| t.content.clone()),
            ProtocolVariant::FinalHostOnly => None,
        };

        let objection = debater_object(
            &prior,
            forwarded_draft.as_deref(),
            &options.prompts,
            backends.debater.as_ref(),
            options.objection_policy,
        )?;
        track(&objection, &mut usage_unknown, &mut known_tokens);
        push(trace, sink, Role::Debater, MessageType::Objection, next_round, objection)?;

        let revision = defender_revise(task, &trace.turns, &options.prompts, backends.defender.as_ref())?;
        track(&revision, &mut usage_unknown, &mut known_tokens);
        push(trace, sink, Role::Defender, MessageType::Revision, next_round, revision)?;

        if options.variant == ProtocolVariant::PerRoundHostDraft {
            let draft = host_synthesize(task, &trace.turns, &options.prompts, backends.host.as_ref())?;
            track(&draft, &mut usage_unknown, &mut known_tokens);
            push(trace, sink, Role::Host, MessageType::HostDraft, next_round, draft)?;
        }

        completed_rounds = next_round;
    }

    let final_answer = host_synthesize(task, &trace.turns, &options.prompts, backends.host.as_ref())?;
    push(trace, sink, Role::Host, MessageType::FinalAnswer, completed_rounds + 1, final_answer)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{RecordingBackend, TokenUsage};
    use crate::trace::NullSink;

    fn task() -> Task {
        Task::from_fields("t00000", "What is 2 + 2?", None)
    }

    fn script_for_rounds(rounds: u32, drafts: bool) -> Arc<ScriptedResponses> {
        let mut entries: Vec<(String, usize, String)> = Vec::new();
        entries.push(("defender".into(), 0, "initial answer 4".into()));
        for r in 0..rounds as usize {
            entries.push(("debater".into(), r, format!("are you sure about step {r}?")));
            entries.push(("defender".into(), r + 1, format!("revised answer {r}")));
            if drafts {
                entries.push(("host".into(), r, format!("DRAFT-{r}")));
            }
        }
        let host_final_idx = if drafts { rounds as usize } else { 0 };
        entries.push(("host".into(), host_final_idx, "final: 4".into()));
        Arc::new(ScriptedResponses::from_entries(entries))
    }

    fn recorded_set(script: Arc<ScriptedResponses>) -> (BackendSet, Arc<RecordingBackend>, Arc<RecordingBackend>, Arc<RecordingBackend>) {
        let raw = BackendSet::scripted(script);
        let defender = RecordingBackend::new(raw.defender);
        let debater = RecordingBackend::new(raw.debater);
        let host = RecordingBackend::new(raw.host);
        let set = BackendSet {
            defender: defender.clone(),
            debater: debater.clone(),
            host: host.clone(),
        };
        (set, defender, debater, host)
    }

    fn options(n: u32, variant: ProtocolVariant) -> ProtocolOptions {
        ProtocolOptions {
            variant,
            stop_rule: StopRule::FixedRounds(RoundBudget(n)),
            prompts: RolePromptSet::default(),
            objection_policy: ObjectionPolicy::Lenient,
        }
    }

    fn type_sequence(trace: &Trace) -> Vec<MessageType> {
        trace.turns.iter().map(|t| t.message_type).collect()
    }

    #[test]
    fn degenerate_budget_runs_two_calls() {
        let script = script_for_rounds(0, false);
        let (set, d, q, h) = recorded_set(script.clone());
        let trace = run_protocol(
            &task(),
            RunIdentity::derive("t00000", "fp"),
            &options(0, ProtocolVariant::FinalHostOnly),
            &set,
            &mut NullSink,
        );
        assert!(trace.status.is_complete());
        assert_eq!(
            type_sequence(&trace),
            vec![MessageType::TaskStatement, MessageType::Answer, MessageType::FinalAnswer]
        );
        assert_eq!(d.call_count() + q.call_count() + h.call_count(), 2);
        assert_eq!(script.total_served(), 2);
    }

    #[test]
    fn three_rounds_final_host_only() {
        let script = script_for_rounds(3, false);
        let (set, d, q, h) = recorded_set(script);
        let trace = run_protocol(
            &task(),
            RunIdentity::derive("t00000", "fp"),
            &options(3, ProtocolVariant::FinalHostOnly),
            &set,
            &mut NullSink,
        );
        assert!(trace.status.is_complete());
        use MessageType::*;
        assert_eq!(
            type_sequence(&trace),
            vec![TaskStatement, Answer, Objection, Revision, Objection, Revision, Objection, Revision, FinalAnswer]
        );
        // 2N+2 with N=3.
        assert_eq!(d.call_count() + q.call_count() + h.call_count(), 8);
        assert_eq!(d.call_count(), 4);
        assert_eq!(q.call_count(), 3);
        assert_eq!(h.call_count(), 1);
        assert_eq!(trace.final_answer().unwrap().round, 4);
    }

    #[test]
    fn one_round_per_round_draft() {
        let script = script_for_rounds(1, true);
        let (set, d, q, h) = recorded_set(script);
        let trace = run_protocol(
            &task(),
            RunIdentity::derive("t00000", "fp"),
            &options(1, ProtocolVariant::PerRoundHostDraft),
            &set,
            &mut NullSink,
        );
        assert!(trace.status.is_complete());
        use MessageType::*;
        assert_eq!(
            type_sequence(&trace),
            vec![TaskStatement, Answer, Objection, Revision, HostDraft, FinalAnswer]
        );
        // 3N+2 with N=1.
        assert_eq!(d.call_count() + q.call_count() + h.call_count(), 5);

        // Round 1 Defender contexts never contain any draft content.
        for call in d.recorded_calls() {
            for msg in call {
                assert!(!msg.content.contains("DRAFT-"), "defender saw a host draft");
            }
        }
    }

    #[test]
    fn draft_forwarded_to_next_debater() {
        let script = script_for_rounds(2, true);
        let (set, _, q, _) = recorded_set(script);
        run_protocol(
            &task(),
            RunIdentity::derive("t00000", "fp"),
            &options(2, ProtocolVariant::PerRoundHostDraft),
            &set,
            &mut NullSink,
        );
        let calls = q.recorded_calls();
        assert_eq!(calls.len(), 2);
        // Round 1: no draft yet.
        assert!(!calls[0].iter().any(|m| m.content.contains("DRAFT-")));
        // Round 2: the round-1 draft is forwarded alongside the revision.
        let round2_user = &calls[1].last().unwrap().content;
        assert!(round2_user.contains("DRAFT-0"));
        assert!(round2_user.contains("revised answer 0"));
    }

    #[test]
    fn revision_context_contains_task_once_and_all_objections() {
        let t = task();
        let mut trace = Trace::new("r", "t00000", "fp");
        trace.push_next(Role::User, MessageType::TaskStatement, 0, &t.prompt, None).unwrap();
        trace.push_next(Role::Defender, MessageType::Answer, 0, "a0", None).unwrap();
        trace.push_next(Role::Debater, MessageType::Objection, 1, "O-one?", None).unwrap();
        trace.push_next(Role::Defender, MessageType::Revision, 1, "a1", None).unwrap();
        trace.push_next(Role::Debater, MessageType::Objection, 2, "O-two?", None).unwrap();

        let prompts = RolePromptSet::default();
        let context = defender_revision_context(&t, &trace.turns, &prompts);
        let joined: String = context.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n---\n");
        assert_eq!(joined.matches(&t.prompt).count(), 1, "task must appear exactly once");
        assert!(joined.contains("O-one?"));
        assert!(joined.contains("O-two?"));
        // Newest objection carries the revise instruction.
        assert!(context.last().unwrap().content.contains("O-two?"));
        assert!(context.last().unwrap().content.contains("Revise your answer"));
    }

    #[test]
    fn validator_rules() {
        assert!(validate_objection("Did you check X?\n- Could you show Y?").is_ok());
        let fault = validate_objection("You should recount.").unwrap_err();
        assert_eq!(fault.reason, "declarative unit");
        let fault = validate_objection("").unwrap_err();
        assert_eq!(fault.reason, "empty objection");
        // A question with a trailing remark in the same unit passes.
        assert!(validate_objection(
            "Are you sure there are only 4 r's? Counting manually, it appears there may be more than 4."
        )
        .is_ok());
        assert!(validate_objection("The answer is 5.").is_err());
    }

    #[test]
    fn strict_mode_rejects_then_retries_once() {
        // First debater reply violates, the retry passes.
        let script = Arc::new(ScriptedResponses::from_entries(vec![
            ("defender", 0, "a0"),
            ("debater", 0, "The answer is 5."),
            ("debater", 1, "Could you recount?"),
            ("defender", 1, "a1"),
            ("host", 0, "final"),
        ]));
        let set = BackendSet::scripted(script);
        let mut opts = options(1, ProtocolVariant::FinalHostOnly);
        opts.objection_policy = ObjectionPolicy::Strict;
        let trace = run_protocol(&task(), RunIdentity::derive("t00000", "fp"), &opts, &set, &mut NullSink);
        assert!(trace.status.is_complete());
        let objection = trace.turns.iter().find(|t| t.message_type == MessageType::Objection).unwrap();
        assert_eq!(objection.content, "Could you recount?");
    }

    #[test]
    fn strict_mode_aborts_after_failed_retry() {
        let script = Arc::new(ScriptedResponses::from_entries(vec![
            ("defender", 0, "a0"),
            ("debater", 0, "The answer is 5."),
            ("debater", 1, "Still not a question."),
        ]));
        let set = BackendSet::scripted(script);
        let mut opts = options(1, ProtocolVariant::FinalHostOnly);
        opts.objection_policy = ObjectionPolicy::Strict;
        let trace = run_protocol(&task(), RunIdentity::derive("t00000", "fp"), &opts, &set, &mut NullSink);
        match &trace.status {
            TraceStatus::Incomplete(reason) => assert!(reason.contains("objection contract")),
            other => panic!("expected incomplete, got {other:?}"),
        }
        // The violating objection was never persisted.
        assert!(trace.turns.iter().all(|t| t.message_type != MessageType::Objection));
    }

    #[test]
    fn lenient_mode_keeps_violating_objection() {
        let script = Arc::new(ScriptedResponses::from_entries(vec![
            ("defender", 0, "a0"),
            ("debater", 0, "The answer is 5."),
            ("defender", 1, "a1"),
            ("host", 0, "final"),
        ]));
        let set = BackendSet::scripted(script);
        let trace = run_protocol(
            &task(),
            RunIdentity::derive("t00000", "fp"),
            &options(1, ProtocolVariant::FinalHostOnly),
            &set,
            &mut NullSink,
        );
        assert!(trace.status.is_complete());
        let objection = trace.turns.iter().find(|t| t.message_type == MessageType::Objection).unwrap();
        assert_eq!(objection.content, "The answer is 5.");
    }

    #[test]
    fn backend_failure_yields_incomplete_partial_trace() {
        // Script runs out before the host call.
        let script = Arc::new(ScriptedResponses::from_entries(vec![
            ("defender", 0, "a0"),
            ("debater", 0, "why?"),
            ("defender", 1, "a1"),
        ]));
        let set = BackendSet::scripted(script);
        let trace = run_protocol(
            &task(),
            RunIdentity::derive("t00000", "fp"),
            &options(1, ProtocolVariant::FinalHostOnly),
            &set,
            &mut NullSink,
        );
        match &trace.status {
            TraceStatus::Incomplete(reason) => assert!(reason.contains("script exhausted")),
            other => panic!("expected incomplete, got {other:?}"),
        }
        use MessageType::*;
        assert_eq!(type_sequence(&trace), vec![TaskStatement, Answer, Objection, Revision]);
    }

    #[test]
    fn empty_reply_is_preserved() {
        let script = Arc::new(ScriptedResponses::from_entries(vec![
            ("defender", 0, ""),
            ("host", 0, "final"),
        ]));
        let set = BackendSet::scripted(script);
        let trace = run_protocol(
            &task(),
            RunIdentity::derive("t00000", "fp"),
            &options(0, ProtocolVariant::FinalHostOnly),
            &set,
            &mut NullSink,
        );
        assert!(trace.status.is_complete());
        assert_eq!(trace.turns[1].content, "");
    }

    #[test]
    fn wall_clock_zero_skips_rounds() {
        let script = script_for_rounds(0, false);
        let set = BackendSet::scripted(script);
        let mut opts = options(0, ProtocolVariant::FinalHostOnly);
        opts.stop_rule = StopRule::MaxWallClock(Duration::ZERO);
        let trace = run_protocol(&task(), RunIdentity::derive("t00000", "fp"), &opts, &set, &mut NullSink);
        assert!(trace.status.is_complete());
        assert_eq!(trace.round_count(), 0);
    }

    #[test]
    fn token_budget_without_usage_stops_conservatively() {
        let script = script_for_rounds(3, false);
        let set = BackendSet::scripted(script);
        let mut opts = options(3, ProtocolVariant::FinalHostOnly);
        opts.stop_rule = StopRule::MaxTotalTokens(1_000_000);
        let trace = run_protocol(&task(), RunIdentity::derive("t00000", "fp"), &opts, &set, &mut NullSink);
        assert!(trace.status.is_complete());
        // Mock reports no usage, so the budget is unenforceable and the
        // loop finalizes immediately.
        assert_eq!(trace.round_count(), 0);
    }

    struct FixedUsageBackend;

    impl ChatBackend for FixedUsageBackend {
        fn complete(&self, _messages: &[ChatMessage]) -> Result<Completion, BackendError> {
            Ok(Completion {
                text: "ok? sure?".into(),
                usage: Some(TokenUsage { prompt_tokens: 30, completion_tokens: 20 }),
            })
        }

        fn describe(&self) -> String {
            "fixed-usage".into()
        }
    }

    #[test]
    fn token_budget_with_usage_bounds_rounds() {
        let set = BackendSet::shared(Arc::new(FixedUsageBackend));
        let mut opts = ProtocolOptions::default();
        // A_0 costs 50; each round costs 100. Budget 260 allows starting
        // rounds while known < 260: after A_0 (50) round 1 runs (150),
        // round 2 runs (250), round 3 starts at 250 < 260 and finishes
        // (350); round 4 is out of budget.
        opts.stop_rule = StopRule::MaxTotalTokens(260);
        let trace = run_protocol(&task(), RunIdentity::derive("t00000", "fp"), &opts, &set, &mut NullSink);
        assert!(trace.status.is_complete());
        assert_eq!(trace.round_count(), 3);
        assert!(trace.turns.iter().all(|t| t.message_type != MessageType::HostDraft));
    }

    #[test]
    fn deterministic_traces_for_identical_config() {
        let run = || {
            let script = script_for_rounds(2, false);
            let set = BackendSet::scripted(script);
            run_protocol(
                &task(),
                RunIdentity::derive("t00000", "fp"),
                &options(2, ProtocolVariant::FinalHostOnly),
                &set,
                &mut NullSink,
            )
        };
        let a = run();
        let b = run();
        assert!(a.eq_ignoring_timestamps(&b));
    }

    #[test]
    fn host_requires_an_answer() {
        let t = task();
        let prompts = RolePromptSet::default();
        let script = Arc::new(ScriptedResponses::from_entries(vec![("host", 0, "x")]));
        let backend = ScriptedBackend::new(script, ScriptCursors::new(), "host");
        let err = host_synthesize(&t, &[], &prompts, &backend).unwrap_err();
        assert!(matches!(err, ProtocolError::Precondition(_)));
    }

    #[test]
    fn prompt_set_validation() {
        assert!(RolePromptSet::default().validate().is_ok());
        let mut p = RolePromptSet::default();
        p.debater_system = "say stuff".into();
        assert!(p.validate().is_err());
        p.debater_system.clear();
        assert!(p.validate().is_err());
    }
}
